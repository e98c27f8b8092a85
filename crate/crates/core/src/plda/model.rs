use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, joint_diagonalize};

/// Two-covariance PLDA model `φ = μ + F y + ε`, `y ~ N(0, I)`, `ε ~ N(0, Σ)`.
///
/// Stored in the basis that simultaneously diagonalises the between-speaker
/// covariance `Φ_B = F Fᵀ` and the residual covariance `Σ`: a centred
/// embedding `φ − μ` maps to `x = A (φ − μ)`, where `A Φ_B Aᵀ` and `A Σ Aᵀ`
/// are diagonal. Speaker-loading columns beyond `speaker_dim` are zero, so the
/// loading in that basis is the first `speaker_dim` columns of
/// `diag(√between)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub(crate) mean: DVector<f64>,
    pub(crate) transform: DMatrix<f64>,
    pub(crate) between: DVector<f64>,
    pub(crate) residual: DVector<f64>,
    pub(crate) speaker_dim: usize,
    pub(crate) log_abs_det_transform: f64,
}

impl PldaModel {
    /// Model whose covariances are already diagonal in embedding space.
    pub fn from_diagonal(mean: Vec<f64>, between: Vec<f64>, residual: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        Self::from_parts(
            DVector::from_vec(mean),
            DMatrix::identity(d, d),
            DVector::from_vec(between),
            DVector::from_vec(residual),
            d,
        )
    }

    /// Builds a model from an embedding-space loading `F` (`D × d_y`) and a
    /// full residual covariance `Σ`.
    pub fn from_loading(mean: Vec<f64>, loading: &DMatrix<f64>, residual: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        check_dim(d, loading.nrows())?;
        check_dim(d, residual.nrows())?;
        check_dim(d, residual.ncols())?;
        let speaker_dim = loading.ncols();
        if speaker_dim > d {
            return Err(Error::invalid(format!("speaker dimension {speaker_dim} exceeds {d}")));
        }
        let between = loading * loading.transpose();
        Self::from_covariances(mean, &between, residual, speaker_dim)
    }

    /// Builds a model from embedding-space `Φ_B` and `Σ`; `Φ_B` is truncated
    /// to its leading `speaker_dim` eigen-directions.
    pub fn from_covariances(
        mean: Vec<f64>,
        between: &DMatrix<f64>,
        residual: &DMatrix<f64>,
        speaker_dim: usize,
    ) -> Result<Self> {
        let d = mean.len();
        check_dim(d, between.nrows())?;
        check_dim(d, between.ncols())?;
        let (transform, mut lambda) = joint_diagonalize(residual, between)?;
        for (i, l) in lambda.iter_mut().enumerate() {
            if i >= speaker_dim || *l < 0.0 {
                *l = 0.0;
            }
        }
        Self::from_parts(
            DVector::from_vec(mean),
            transform,
            lambda,
            DVector::from_element(d, 1.0),
            speaker_dim,
        )
    }

    /// Assembles a model from its stored representation.
    pub fn from_parts(
        mean: DVector<f64>,
        transform: DMatrix<f64>,
        between: DVector<f64>,
        residual: DVector<f64>,
        speaker_dim: usize,
    ) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::invalid("model dimension must be at least 1"));
        }
        check_dim(d, transform.nrows())?;
        check_dim(d, transform.ncols())?;
        check_dim(d, between.len())?;
        check_dim(d, residual.len())?;
        if speaker_dim == 0 || speaker_dim > d {
            return Err(Error::invalid(format!(
                "speaker dimension {speaker_dim} not in 1..={d}"
            )));
        }
        if mean.iter().chain(transform.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("model mean/transform contain non-finite values"));
        }
        if let Some(i) = residual.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!(
                "residual covariance entry {i} must be positive"
            )));
        }
        if let Some(i) = between.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!(
                "between covariance entry {i} must be nonnegative"
            )));
        }
        if let Some(i) = (speaker_dim..d).find(|&i| between[i] != 0.0) {
            return Err(Error::invalid(format!(
                "between covariance entry {i} lies outside the {speaker_dim}-dimensional speaker subspace"
            )));
        }
        // Summed from the LU factor; the determinant itself overflows at moderate D.
        let u = transform.clone().lu().u();
        let log_abs_det: f64 = u.diagonal().iter().map(|v| v.abs().ln()).sum();
        if !log_abs_det.is_finite() {
            return Err(Error::invalid("model transform is singular"));
        }
        Ok(Self {
            mean,
            transform,
            between,
            residual,
            speaker_dim,
            log_abs_det_transform: log_abs_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn speaker_dim(&self) -> usize {
        self.speaker_dim
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    /// Diagonal of `Φ_B` in the model basis.
    pub fn between_cov(&self) -> &DVector<f64> {
        &self.between
    }

    /// Diagonal of `Σ` in the model basis.
    pub fn residual_cov(&self) -> &DVector<f64> {
        &self.residual
    }

    /// Speaker loading in the model basis (`D × d_y`).
    pub(crate) fn basis_loading(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim(), self.speaker_dim, |r, c| {
            if r == c {
                self.between[r].sqrt()
            } else {
                0.0
            }
        })
    }

    fn inverse_transform(&self) -> DMatrix<f64> {
        self.transform
            .clone()
            .try_inverse()
            .expect("transform invertibility is checked at construction")
    }

    fn to_embedding_space(&self, basis: &DMatrix<f64>) -> DMatrix<f64> {
        let inv = self.inverse_transform();
        let mut out = &inv * basis * inv.transpose();
        linalg::symmetrize(&mut out);
        out
    }

    /// Speaker loading `F` in embedding space (`D × d_y`).
    pub fn speaker_loading(&self) -> DMatrix<f64> {
        self.inverse_transform() * self.basis_loading()
    }

    /// `Φ_B` in embedding space.
    pub fn between_cov_full(&self) -> DMatrix<f64> {
        self.to_embedding_space(&DMatrix::from_diagonal(&self.between))
    }

    /// `Σ` in embedding space.
    pub fn residual_cov_full(&self) -> DMatrix<f64> {
        self.to_embedding_space(&DMatrix::from_diagonal(&self.residual))
    }

    /// `Φ_tot = Φ_B + Σ` in embedding space.
    pub fn total_cov_full(&self) -> DMatrix<f64> {
        self.to_embedding_space(&DMatrix::from_diagonal(&(&self.between + &self.residual)))
    }

    /// `A (φ − μ)`.
    pub fn project(&self, vector: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.dim(), vector.len())?;
        Ok(&self.transform * (DVector::from_column_slice(vector) - &self.mean))
    }

    /// Maps a model-basis vector back to embedding space (`μ + A⁻¹ x`).
    pub fn unproject(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(&self.mean + self.inverse_transform() * x)
    }

    /// `A diag(u) Aᵀ`, or `None` when `u` is all zero.
    pub(crate) fn project_uncertainty(&self, u: &[f64]) -> Result<Option<DMatrix<f64>>> {
        check_dim(self.dim(), u.len())?;
        if let Some(i) = u.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!(
                "uncertainty entry {i} = {} must be nonnegative",
                u[i]
            )));
        }
        if u.iter().all(|&v| v == 0.0) {
            return Ok(None);
        }
        let mut scaled = self.transform.clone();
        for (c, mut col) in scaled.column_iter_mut().enumerate() {
            col *= u[c].sqrt();
        }
        let mut out = &scaled * scaled.transpose();
        linalg::symmetrize(&mut out);
        Ok(Some(out))
    }

    /// Utterance-dependent within-speaker covariance `Φ_W,r = Σ + Φ_U,r` in the model basis.
    pub(crate) fn within_cov(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        let mut w = DMatrix::from_diagonal(&self.residual);
        if let Some(pu) = self.project_uncertainty(u)? {
            w += pu;
        }
        Ok(w)
    }
}
