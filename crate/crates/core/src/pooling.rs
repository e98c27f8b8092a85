//! Gaussian posterior-inference pooling and propagation of the pooled
//! covariance through the batch-norm + affine embedding head.
//!
//! Frame estimates `z_t` with diagonal precisions `L_t` are combined with a
//! Gaussian prior `(μ_p, L_p)` into the posterior
//!
//! ```text
//! L_s = L_p + Σ_t L_t
//! φ_s = L_s⁻¹ (L_p μ_p + Σ_t L_t z_t)
//! ```
//!
//! and the head maps `φ_s` to `φ_r = W ((φ_s − μ_BN) ∘ q) + b` with
//! `q_i = γ_i / σ_BN,i`. Since the head is affine, the pooled covariance
//! `L_s⁻¹` maps to `Φ_U = W diag(q) L_s⁻¹ diag(q) Wᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::embedding::UncertainEmbedding;
use crate::error::{check_dim, Error, Result};

/// One frame-level estimate: mean `z_t` and the diagonal of its precision `L_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEstimate {
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
}

impl FrameEstimate {
    pub fn new(mean: Vec<f64>, precision: Vec<f64>) -> Self {
        Self { mean, precision }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
}

impl GaussianPrior {
    /// The `(0, I)` prior.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            precision: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        check_dim(self.mean.len(), self.precision.len())?;
        check_positive("prior precision", &self.precision)
    }
}

/// Pooled posterior `(φ_s, diag L_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
}

impl PosteriorStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Diagonal of the posterior covariance `L_s⁻¹`.
    pub fn covariance(&self) -> Vec<f64> {
        self.precision.iter().map(|p| 1.0 / p).collect()
    }
}

fn check_positive(what: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
        Some(i) => Err(Error::invalid(format!(
            "{what}[{i}] = {} is not positive and finite",
            v[i]
        ))),
        None => Ok(()),
    }
}

fn check_frame(frame: &FrameEstimate, dim: usize) -> Result<()> {
    check_dim(dim, frame.mean.len())?;
    check_dim(dim, frame.precision.len())?;
    check_positive("frame precision", &frame.precision)
}

/// Posterior of the latent speaker variable given the frames. With no frames
/// the prior is returned unchanged.
pub fn pool_posterior(frames: &[FrameEstimate], prior: &GaussianPrior) -> Result<PosteriorStats> {
    prior.validate()?;
    let dim = prior.dim();
    let mut precision = prior.precision.clone();
    let mut weighted: Vec<f64> = prior.precision.iter().zip(&prior.mean).map(|(l, z)| l * z).collect();
    for frame in frames {
        check_frame(frame, dim)?;
        for i in 0..dim {
            precision[i] += frame.precision[i];
            weighted[i] += frame.precision[i] * frame.mean[i];
        }
    }
    let mean = weighted.iter().zip(&precision).map(|(w, l)| w / l).collect();
    Ok(PosteriorStats { mean, precision })
}

/// Which terms enter the normaliser of the mixing weights `A_t = L⁻¹ L_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixingConvention {
    /// `t = 0..T`, the prior counted as frame 0; consistent with [`pool_posterior`].
    #[default]
    IncludePrior,
    /// `t = 1..T` only; the weights then ignore the prior entirely.
    FramesOnly,
}

/// Diagonal mixing weights `A_t`, one vector per term. Under
/// [`MixingConvention::IncludePrior`] the first entry belongs to the prior and
/// `Σ_t A_t z_t` reproduces the pooled mean.
pub fn mixing_weights(
    frames: &[FrameEstimate],
    prior: &GaussianPrior,
    convention: MixingConvention,
) -> Result<Vec<Vec<f64>>> {
    prior.validate()?;
    let dim = prior.dim();
    for f in frames {
        check_frame(f, dim)?;
    }
    let mut norm = match convention {
        MixingConvention::IncludePrior => prior.precision.clone(),
        MixingConvention::FramesOnly => vec![0.0; dim],
    };
    for f in frames {
        for (n, l) in norm.iter_mut().zip(&f.precision) {
            *n += l;
        }
    }
    let scale = |l: &[f64]| -> Vec<f64> { l.iter().zip(&norm).map(|(l, n)| l / n).collect() };
    let mut out = Vec::with_capacity(frames.len() + 1);
    if convention == MixingConvention::IncludePrior {
        out.push(scale(&prior.precision));
    }
    out.extend(frames.iter().map(|f| scale(&f.precision)));
    Ok(out)
}

/// Batch-norm followed by the embedding affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub bn_mean: Vec<f64>,
    pub bn_std: Vec<f64>,
    /// Batch-norm `γ`; the BN shift `β` is folded into `bias`.
    pub bn_scale: Vec<f64>,
    /// `D × d_h`.
    pub weight: DMatrix<f64>,
    pub bias: Vec<f64>,
}

impl HeadParams {
    pub fn new(bn_mean: Vec<f64>, bn_std: Vec<f64>, weight: DMatrix<f64>, bias: Vec<f64>) -> Result<Self> {
        let bn_scale = vec![1.0; bn_mean.len()];
        Self::with_scale(bn_mean, bn_std, bn_scale, weight, bias)
    }

    pub fn with_scale(
        bn_mean: Vec<f64>,
        bn_std: Vec<f64>,
        bn_scale: Vec<f64>,
        weight: DMatrix<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let head = Self {
            bn_mean,
            bn_std,
            bn_scale,
            weight,
            bias,
        };
        head.validate()?;
        Ok(head)
    }

    /// `W = I`, `b = 0`, `μ_BN = 0`, `σ_BN = 1`.
    pub fn identity(dim: usize) -> Self {
        Self {
            bn_mean: vec![0.0; dim],
            bn_std: vec![1.0; dim],
            bn_scale: vec![1.0; dim],
            weight: DMatrix::identity(dim, dim),
            bias: vec![0.0; dim],
        }
    }

    /// Input (pooled) dimension `d_h`.
    pub fn input_dim(&self) -> usize {
        self.bn_mean.len()
    }

    /// Output (embedding) dimension `D`.
    pub fn output_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dh = self.input_dim();
        check_dim(dh, self.bn_std.len())?;
        check_dim(dh, self.bn_scale.len())?;
        check_dim(dh, self.weight.ncols())?;
        check_dim(self.output_dim(), self.weight.nrows())?;
        check_positive("bn_std", &self.bn_std)
    }

    fn q(&self) -> Vec<f64> {
        self.bn_scale.iter().zip(&self.bn_std).map(|(g, s)| g / s).collect()
    }
}

fn head_mean(post: &PosteriorStats, head: &HeadParams) -> Result<(DVector<f64>, Vec<f64>)> {
    head.validate()?;
    check_dim(head.input_dim(), post.dim())?;
    check_dim(post.dim(), post.precision.len())?;
    check_positive("posterior precision", &post.precision)?;
    let q = head.q();
    let normalized = DVector::from_iterator(
        post.dim(),
        (0..post.dim()).map(|i| (post.mean[i] - head.bn_mean[i]) * q[i]),
    );
    let mean = &head.weight * normalized + DVector::from_column_slice(&head.bias);
    Ok((mean, q))
}

/// Point estimate and diagonal uncertainty of the embedding produced by the head.
///
/// Only the diagonal of `W diag(q² / L_s) Wᵀ` is kept.
pub fn propagate_through_head(
    id: impl Into<String>,
    post: &PosteriorStats,
    head: &HeadParams,
) -> Result<UncertainEmbedding> {
    let (mean, q) = head_mean(post, head)?;
    let var: Vec<f64> = q.iter().zip(&post.precision).map(|(q, l)| q * q / l).collect();
    let w = &head.weight;
    let uncertainty = (0..w.nrows())
        .map(|r| (0..w.ncols()).map(|c| w[(r, c)] * w[(r, c)] * var[c]).sum())
        .collect();
    Ok(UncertainEmbedding::new(id, mean.as_slice().to_vec(), uncertainty))
}

/// Like [`propagate_through_head`] but returns the full `D × D` covariance.
pub fn propagate_through_head_full(post: &PosteriorStats, head: &HeadParams) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (mean, q) = head_mean(post, head)?;
    let mut scaled = head.weight.clone();
    for (c, mut col) in scaled.column_iter_mut().enumerate() {
        col *= q[c] / post.precision[c].sqrt();
    }
    let cov = &scaled * scaled.transpose();
    Ok((mean, cov))
}
