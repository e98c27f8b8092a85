use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub(crate) type Chol = Cholesky<f64, Dyn>;

pub(crate) fn cholesky(m: DMatrix<f64>, what: &'static str) -> Result<Chol> {
    Cholesky::new(m).ok_or(Error::NotPositiveDefinite(what))
}

pub(crate) fn log_det(c: &Chol) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `rᵀ S⁻¹ r` where `c` factors `S`.
pub(crate) fn quad_form(c: &Chol, r: &DVector<f64>) -> f64 {
    let z = c
        .l_dirty()
        .solve_lower_triangular(r)
        .expect("cholesky factor has a positive diagonal");
    z.norm_squared()
}

/// Log-density of a zero-mean Gaussian with factored covariance at `r`.
pub(crate) fn gaussian_log_density(c: &Chol, r: &DVector<f64>) -> f64 {
    -0.5 * (r.len() as f64 * LN_2PI + log_det(c) + quad_form(c, r))
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub(crate) fn sorted_eigen(mut m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    symmetrize(&mut m);
    let eig = SymmetricEigen::new(m);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Clamps the eigenvalues of a symmetric matrix from below.
pub(crate) fn floor_eigenvalues(m: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let (values, vectors) = sorted_eigen(m);
    let clamped = values.map(|v| v.max(floor));
    let mut out = &vectors * DMatrix::from_diagonal(&clamped) * vectors.transpose();
    symmetrize(&mut out);
    out
}

/// Finds `A` with `A W Aᵀ = I` and `A B Aᵀ = diag(λ)`, `λ` descending.
pub(crate) fn joint_diagonalize(within: &DMatrix<f64>, between: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = within.nrows();
    let chol = cholesky(within.clone(), "within-speaker covariance")?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::NotPositiveDefinite("within-speaker covariance"))?;
    let c = &l_inv * between * l_inv.transpose();
    let (values, vectors) = sorted_eigen(c);
    Ok((vectors.transpose() * l_inv, values))
}

pub(crate) fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
