//! Centering, whitening + length normalization, and length scaling.
//!
//! Length scaling multiplies an embedding by `c = (D / φᵀ Σ⁻¹ φ)^{1/2}` so its
//! Mahalanobis norm under `Σ` equals `D`. It is applied to evaluation
//! embeddings only; a back-end trained on unscaled data sees evaluation
//! vectors at the scale of the training data. The uncertainty-aware variant
//! adds the utterance's own posterior covariance to `Σ`. Because the
//! embedding is scaled linearly, its uncertainty is scaled by `c²`.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::embedding::{Embedding, UncertainEmbedding};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, cholesky, dvec, floor_eigenvalues, quad_form, sorted_eigen};

pub const EIGEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsSource {
    Train,
    DevAdapted,
}

/// Mean and total covariance used for centering and length scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteringStats {
    pub mean: DVector<f64>,
    pub total_cov: DMatrix<f64>,
    pub source: StatsSource,
}

impl CenteringStats {
    pub fn new(mean: DVector<f64>, total_cov: DMatrix<f64>, source: StatsSource) -> Result<Self> {
        check_dim(mean.len(), total_cov.nrows())?;
        check_dim(mean.len(), total_cov.ncols())?;
        if mean.is_empty() {
            return Err(Error::invalid("statistics dimension must be at least 1"));
        }
        cholesky(total_cov.clone(), "total covariance")?;
        Ok(Self {
            mean,
            total_cov,
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Replaces the mean with that of a development set, keeping the covariance.
    pub fn adapt_mean<'a, I>(&self, dev: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let (mean, n) = mean_of(dev, self.dim())?;
        if n == 0 {
            return Err(Error::invalid("cannot adapt the mean to an empty development set"));
        }
        Ok(Self {
            mean,
            total_cov: self.total_cov.clone(),
            source: StatsSource::DevAdapted,
        })
    }
}

fn mean_of<'a, I>(vectors: I, dim: usize) -> Result<(DVector<f64>, usize)>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut sum = DVector::zeros(dim);
    let mut n = 0;
    for v in vectors {
        check_dim(dim, v.len())?;
        sum += dvec(v);
        n += 1;
    }
    Ok((sum / n.max(1) as f64, n))
}

/// Sample mean and Bessel-corrected covariance with eigenvalues floored at
/// [`EIGEN_FLOOR`].
pub fn estimate_stats<'a, I>(embeddings: I) -> Result<CenteringStats>
where
    I: IntoIterator<Item = &'a [f64]>,
    I::IntoIter: Clone,
{
    let it = embeddings.into_iter();
    let dim = match it.clone().next() {
        Some(v) => v.len(),
        None => return Err(Error::invalid("cannot estimate statistics from an empty collection")),
    };
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be at least 1"));
    }
    let (mean, n) = mean_of(it.clone(), dim)?;
    let mut scatter = DMatrix::zeros(dim, dim);
    for v in it {
        let x = dvec(v) - &mean;
        scatter.ger(1.0, &x, &x, 1.0);
    }
    if n > 1 {
        scatter /= (n - 1) as f64;
    }
    let total_cov = floor_eigenvalues(scatter, EIGEN_FLOOR);
    CenteringStats::new(mean, total_cov, StatsSource::Train)
}

/// Subtracts the statistics mean; the uncertainty is unchanged.
pub fn center(e: &UncertainEmbedding, stats: &CenteringStats) -> Result<UncertainEmbedding> {
    check_dim(stats.dim(), e.dim())?;
    let v = e.vector().iter().zip(stats.mean.iter()).map(|(a, m)| a - m).collect();
    Ok(UncertainEmbedding::new(e.id(), v, e.uncertainty.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LengthScaleForm {
    /// `c = (D / φᵀ Σ⁻¹ φ)^{1/2}`.
    #[default]
    Mahalanobis,
    /// `c = (D / φᵀ Σ φ)^{1/2}`.
    Literal,
}

impl FromStr for LengthScaleForm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mahalanobis" => Ok(Self::Mahalanobis),
            "literal" => Ok(Self::Literal),
            other => Err(format!(
                "unknown length-scaling form `{other}` (expected mahalanobis or literal)"
            )),
        }
    }
}

/// The scale factor `c` applied by [`length_scale`].
pub fn length_scale_factor(
    e: &UncertainEmbedding,
    stats: &CenteringStats,
    form: LengthScaleForm,
    uncertainty_aware: bool,
) -> Result<f64> {
    check_dim(stats.dim(), e.dim())?;
    check_dim(e.dim(), e.uncertainty.len())?;
    if e.vector().iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVector(e.id().to_owned()));
    }
    let mut sigma = stats.total_cov.clone();
    if uncertainty_aware {
        for (i, u) in e.uncertainty.iter().enumerate() {
            sigma[(i, i)] += u;
        }
    }
    let phi = dvec(e.vector());
    let q = match form {
        LengthScaleForm::Mahalanobis => quad_form(&cholesky(sigma, "length-scaling covariance")?, &phi),
        LengthScaleForm::Literal => phi.dot(&(&sigma * &phi)),
    };
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::invalid(format!("length-scaling norm of `{}` is {q}", e.id())));
    }
    Ok((e.dim() as f64 / q).sqrt())
}

/// Length scaling; with `uncertainty_aware` the covariance is `Σ_tot + diag(Φ_U)`.
pub fn length_scale(
    e: &UncertainEmbedding,
    stats: &CenteringStats,
    form: LengthScaleForm,
    uncertainty_aware: bool,
) -> Result<UncertainEmbedding> {
    let c = length_scale_factor(e, stats, form, uncertainty_aware)?;
    let v = e.vector().iter().map(|x| c * x).collect();
    let u = e.uncertainty.iter().map(|x| c * c * x).collect();
    Ok(UncertainEmbedding::new(e.id(), v, u))
}

/// Whitening by `Σ^{-1/2}` followed by projection onto the sphere of radius `√D`.
#[derive(Debug, Clone)]
pub struct LengthNormalizer {
    whitening: DMatrix<f64>,
}

impl LengthNormalizer {
    pub fn new(stats: &CenteringStats) -> Self {
        let (values, vectors) = sorted_eigen(stats.total_cov.clone());
        let inv_sqrt = values.map(|v| 1.0 / v.max(EIGEN_FLOOR).sqrt());
        let mut whitening = &vectors * DMatrix::from_diagonal(&inv_sqrt) * vectors.transpose();
        linalg::symmetrize(&mut whitening);
        Self { whitening }
    }

    /// `Σ^{-1/2}`.
    pub fn whitening(&self) -> &DMatrix<f64> {
        &self.whitening
    }

    pub fn apply(&self, e: &Embedding) -> Result<Embedding> {
        check_dim(self.whitening.ncols(), e.dim())?;
        let w = &self.whitening * dvec(&e.vector);
        let norm = w.norm();
        if norm == 0.0 {
            return Err(Error::ZeroVector(e.id.clone()));
        }
        let scale = (e.dim() as f64).sqrt() / norm;
        Ok(Embedding::new(e.id.clone(), (w * scale).as_slice().to_vec()))
    }

    /// [`apply`](Self::apply) treating the normalization as a fixed linear map
    /// `s Σ^{-1/2}` on the uncertainty; only the diagonal of the mapped
    /// covariance is kept.
    pub fn apply_uncertain(&self, e: &UncertainEmbedding) -> Result<UncertainEmbedding> {
        check_dim(e.dim(), e.uncertainty.len())?;
        let out = self.apply(&e.embedding)?;
        let w = &self.whitening;
        let norm_sq = (w * dvec(e.vector())).norm_squared();
        let s2 = e.dim() as f64 / norm_sq;
        let u = (0..w.nrows())
            .map(|r| {
                s2 * (0..w.ncols())
                    .map(|c| w[(r, c)] * w[(r, c)] * e.uncertainty[c])
                    .sum::<f64>()
            })
            .collect();
        Ok(UncertainEmbedding::new(out.id, out.vector, u))
    }
}

/// Whitening + length normalization of a centred embedding.
pub fn length_normalize(e: &Embedding, stats: &CenteringStats) -> Result<Embedding> {
    LengthNormalizer::new(stats).apply(e)
}
