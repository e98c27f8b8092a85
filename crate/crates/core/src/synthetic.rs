//! Synthetic data drawn from the PLDA generative model with per-utterance
//! uncertainty, and a Monte-Carlo estimator of the trial LLR.
//!
//! Each utterance is `φ_r = μ + F y + U_r x + ε` with `y ~ N(0, I)` per
//! speaker, `x ~ N(0, I)` and `ε ~ N(0, Σ)` per utterance, and
//! `U_r = chol(Φ_U,r)`. The uncertainty law is synthetic: every utterance
//! draws a duration `τ ~ U[min, max]` and gets `Φ_U,r = (c / τ) I`, so shorter
//! utterances are less reliable.
//!
//! Randomness comes from ChaCha8 with one stream per entity (model, speaker,
//! utterance, trial list, Monte-Carlo batch), so the output depends only on
//! the seed and not on how work is split across threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::embedding::{LabeledDataset, Trial, TrialLabel, UncertainEmbedding};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{cholesky, dvec, gaussian_log_density};
use crate::plda::PldaModel;

const STREAM_MODEL: u64 = 0;
const STREAM_SPEAKER: u64 = 1 << 60;
const STREAM_UTTERANCE: u64 = 2 << 60;
const STREAM_TRIALS: u64 = 3 << 60;
const STREAM_MC: u64 = 4 << 60;
const STREAM_DERIVED: u64 = 5 << 60;

/// Generator for one entity stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// An independent seed for the `index`-th sub-experiment of `seed`, e.g. to
/// draw disjoint training and evaluation speakers from one model.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    stream_rng(seed, STREAM_DERIVED | index).next_u64()
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dim: usize,
    /// `d_y`; `None` means `dim`.
    pub speaker_dim: Option<usize>,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Half target, half nontarget.
    pub n_trials: usize,
    pub duration_min: f64,
    pub duration_max: f64,
    /// `c` in `Φ_U = (c / τ) I`; zero disables uncertainty.
    pub uncertainty_scale: f64,
    /// Expected per-dimension between-speaker variance of a random model.
    pub between_scale: f64,
    /// Scale of the residual covariance of a random model.
    pub within_scale: f64,
    pub speaker_prefix: String,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            speaker_dim: None,
            n_speakers: 50,
            utts_per_speaker: 10,
            n_trials: 1000,
            duration_min: 1.0,
            duration_max: 10.0,
            uncertainty_scale: 1.0,
            between_scale: 1.0,
            within_scale: 1.0,
            speaker_prefix: "spk".into(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_speakers == 0 || self.utts_per_speaker == 0 {
            return Err(Error::invalid("dimension and counts must be positive"));
        }
        let k = self.speaker_dim.unwrap_or(self.dim);
        if k == 0 || k > self.dim {
            return Err(Error::invalid(format!("speaker dimension {k} not in 1..={}", self.dim)));
        }
        if !(self.duration_min > 0.0 && self.duration_max >= self.duration_min && self.duration_max.is_finite()) {
            return Err(Error::invalid("durations must satisfy 0 < min <= max"));
        }
        if !(self.uncertainty_scale >= 0.0 && self.between_scale > 0.0 && self.within_scale > 0.0) {
            return Err(Error::invalid(
                "scales must be positive (uncertainty scale nonnegative)",
            ));
        }
        if self.n_trials > 0 && (self.n_speakers < 2 || self.utts_per_speaker < 2) {
            return Err(Error::invalid("trials need at least 2 speakers with 2 utterances each"));
        }
        Ok(())
    }

    fn uncertainty(&self, duration: f64) -> f64 {
        self.uncertainty_scale / duration
    }
}

/// Random model: `μ ~ N(0, I)`, `F` with i.i.d. `N(0, between/d_y)` entries,
/// `Σ = within · (G Gᵀ / 2D + I / 2)` with standard normal `G`.
pub fn random_model(cfg: &SimConfig) -> Result<PldaModel> {
    cfg.validate()?;
    let d = cfg.dim;
    let k = cfg.speaker_dim.unwrap_or(d);
    let mut rng = stream_rng(cfg.seed, STREAM_MODEL);
    let mean = normal_vec(&mut rng, d);
    let loading = DMatrix::from_iterator(d, k, normal_vec(&mut rng, d * k).iter().copied())
        * (cfg.between_scale / k as f64).sqrt();
    let g = DMatrix::from_iterator(d, d, normal_vec(&mut rng, d * d).iter().copied());
    let residual = (&g * g.transpose() / (2.0 * d as f64) + DMatrix::identity(d, d) * 0.5) * cfg.within_scale;
    PldaModel::from_loading(mean.as_slice().to_vec(), &loading, &residual)
}

#[derive(Debug, Clone)]
pub struct SimulatedSet {
    pub model: PldaModel,
    pub dataset: LabeledDataset,
    pub trials: Vec<Trial>,
}

/// Draws a random model from `cfg.seed` and samples a dataset and trials from it.
pub fn sample_dataset(cfg: &SimConfig) -> Result<SimulatedSet> {
    let model = random_model(cfg)?;
    let (dataset, trials) = sample_from_model(&model, cfg)?;
    Ok(SimulatedSet { model, dataset, trials })
}

pub fn speaker_id(cfg: &SimConfig, s: usize) -> String {
    format!("{}{s:05}", cfg.speaker_prefix)
}

pub fn utterance_id(cfg: &SimConfig, s: usize, u: usize) -> String {
    format!("{}-{u:03}", speaker_id(cfg, s))
}

/// Samples `cfg.n_speakers × cfg.utts_per_speaker` utterances from `model`,
/// each with its exact `Φ_U,r`, plus a balanced trial list over them.
pub fn sample_from_model(model: &PldaModel, cfg: &SimConfig) -> Result<(LabeledDataset, Vec<Trial>)> {
    cfg.validate()?;
    check_dim(model.dim(), cfg.dim)?;
    let d = model.dim();
    let loading = model.speaker_loading();
    let k = loading.ncols();
    let residual_chol = cholesky(model.residual_cov_full(), "residual covariance")?;
    let residual_factor = residual_chol.l();
    let mean = model.mean();

    let speakers: Vec<(String, Vec<UncertainEmbedding>)> = (0..cfg.n_speakers)
        .into_par_iter()
        .map(|s| {
            let mut srng = stream_rng(cfg.seed, STREAM_SPEAKER | s as u64);
            let speaker = mean + &loading * normal_vec(&mut srng, k);
            let utts = (0..cfg.utts_per_speaker)
                .map(|u| {
                    let mut urng = stream_rng(cfg.seed, STREAM_UTTERANCE | ((s as u64) << 24) | u as u64);
                    let duration = urng.random_range(cfg.duration_min..=cfg.duration_max);
                    let var = cfg.uncertainty(duration);
                    let x = normal_vec(&mut urng, d) * var.sqrt();
                    let eps = &residual_factor * normal_vec(&mut urng, d);
                    let phi = &speaker + x + eps;
                    UncertainEmbedding::new(utterance_id(cfg, s, u), phi.as_slice().to_vec(), vec![var; d])
                })
                .collect();
            (speaker_id(cfg, s), utts)
        })
        .collect();

    let mut dataset = LabeledDataset::new();
    dataset.speakers.extend(speakers);
    let trials = sample_trials(cfg);
    Ok((dataset, trials))
}

fn sample_trials(cfg: &SimConfig) -> Vec<Trial> {
    let mut rng = stream_rng(cfg.seed, STREAM_TRIALS);
    let (ns, nu) = (cfg.n_speakers, cfg.utts_per_speaker);
    let n_target = cfg.n_trials / 2;
    let mut trials = Vec::with_capacity(cfg.n_trials);
    for i in 0..cfg.n_trials {
        let trial = if i < n_target {
            let s = rng.random_range(0..ns);
            let a = rng.random_range(0..nu);
            let b = (a + rng.random_range(1..nu)) % nu;
            Trial::new(utterance_id(cfg, s, a), utterance_id(cfg, s, b), TrialLabel::Target)
        } else {
            let s = rng.random_range(0..ns);
            let t = (s + rng.random_range(1..ns)) % ns;
            let (a, b) = (rng.random_range(0..nu), rng.random_range(0..nu));
            Trial::new(utterance_id(cfg, s, a), utterance_id(cfg, t, b), TrialLabel::Nontarget)
        };
        trials.push(trial);
    }
    trials
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Number of batches used for the batch-means standard error.
pub const MC_BATCHES: usize = 100;

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Monte-Carlo estimate of the trial LLR by sampling the speaker variable
/// from its prior:
///
/// ```text
/// log E_y[N(φ_e|μ+Fy, Φ_W,e) N(φ_t|μ+Fy, Φ_W,t)] − log E_y[N(φ_e|·)] − log E_y[N(φ_t|·)]
/// ```
///
/// Works in embedding space from the model's loading and residual covariance.
/// The standard error is the spread of [`MC_BATCHES`] batch estimates.
pub fn mc_oracle_llr(
    model: &PldaModel,
    enroll: &UncertainEmbedding,
    test: &UncertainEmbedding,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n < 2 * MC_BATCHES {
        return Err(Error::invalid(format!(
            "{n} samples are too few for a batch-means standard error (need {})",
            2 * MC_BATCHES
        )));
    }
    let d = model.dim();
    for e in [enroll, test] {
        check_dim(d, e.dim())?;
        check_dim(d, e.uncertainty.len())?;
    }
    let loading = model.speaker_loading();
    let k = loading.ncols();
    let residual = model.residual_cov_full();
    let within = |u: &[f64]| {
        let mut w = residual.clone();
        for (i, v) in u.iter().enumerate() {
            w[(i, i)] += v;
        }
        cholesky(w, "within-speaker covariance")
    };
    let we = within(&enroll.uncertainty)?;
    let wt = within(&test.uncertainty)?;
    let re = dvec(enroll.vector()) - model.mean();
    let rt = dvec(test.vector()) - model.mean();

    // (LSE joint, LSE enroll, LSE test, count) per batch
    let batches: Vec<(f64, f64, f64, usize)> = (0..MC_BATCHES)
        .into_par_iter()
        .map(|b| {
            let size = n / MC_BATCHES + usize::from(b < n % MC_BATCHES);
            let mut rng = stream_rng(seed, STREAM_MC | b as u64);
            let mut le = Vec::with_capacity(size);
            let mut lt = Vec::with_capacity(size);
            for _ in 0..size {
                let m = &loading * normal_vec(&mut rng, k);
                le.push(gaussian_log_density(&we, &(&re - &m)));
                lt.push(gaussian_log_density(&wt, &(&rt - &m)));
            }
            let joint: Vec<f64> = le.iter().zip(&lt).map(|(a, b)| a + b).collect();
            (log_sum_exp(&joint), log_sum_exp(&le), log_sum_exp(&lt), size)
        })
        .collect();

    let batch_est: Vec<f64> = batches
        .iter()
        .map(|&(j, e, t, size)| j - e - t + (size as f64).ln())
        .collect();
    let pick = |f: fn(&(f64, f64, f64, usize)) -> f64| log_sum_exp(&batches.iter().map(f).collect::<Vec<_>>());
    let estimate = pick(|b| b.0) - pick(|b| b.1) - pick(|b| b.2) + (n as f64).ln();
    let bm = batch_est.iter().sum::<f64>() / MC_BATCHES as f64;
    let var = batch_est.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / (MC_BATCHES - 1) as f64;
    let std_error = (var / MC_BATCHES as f64).sqrt();
    if !(estimate.is_finite() && std_error.is_finite()) {
        return Err(Error::invalid("Monte-Carlo estimate is not finite; increase n"));
    }
    Ok(McEstimate { estimate, std_error })
}
