use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::PldaModel;
use crate::embedding::{validate_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky, floor_eigenvalues, log_det, sorted_eigen, LN_2PI};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub em_iterations: usize,
    /// Smallest admissible eigenvalue of the residual covariance.
    pub variance_floor: f64,
    /// Speaker subspace size `d_y`; `None` means full rank.
    pub speaker_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            em_iterations: 20,
            variance_floor: 1e-6,
            speaker_dim: None,
        }
    }
}

/// Result of [`train_em_traced`].
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: PldaModel,
    /// Training log-likelihood of the initial parameters and after each EM step.
    pub log_likelihood: Vec<f64>,
}

/// Maximum-likelihood PLDA by EM. Uncertainties in `ds` are ignored.
pub fn train_em(ds: &LabeledDataset, cfg: &TrainConfig) -> Result<PldaModel> {
    train_em_traced(ds, cfg).map(|t| t.model)
}

struct SpeakerStats {
    count: usize,
    sum: DVector<f64>,
}

struct Suffstats {
    dim: usize,
    total: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
    speakers: Vec<SpeakerStats>,
}

fn suffstats(ds: &LabeledDataset) -> Suffstats {
    let dim = ds.dim().unwrap_or(0);
    let total = ds.num_utterances();
    let mut mean = DVector::zeros(dim);
    for u in ds.utterances() {
        mean += DVector::from_column_slice(u.vector());
    }
    mean /= total as f64;
    let mut scatter = DMatrix::zeros(dim, dim);
    let mut speakers = Vec::with_capacity(ds.num_speakers());
    for utts in ds.speakers.values() {
        let mut sum = DVector::zeros(dim);
        for u in utts {
            let x = DVector::from_column_slice(u.vector()) - &mean;
            scatter.ger(1.0, &x, &x, 1.0);
            sum += x;
        }
        speakers.push(SpeakerStats { count: utts.len(), sum });
    }
    Suffstats {
        dim,
        total,
        mean,
        scatter,
        speakers,
    }
}

struct EStep {
    log_likelihood: f64,
    /// `Σ_s f_s E[y_s]ᵀ`
    cross: DMatrix<f64>,
    /// `Σ_s n_s E[y_s y_sᵀ]`
    second: DMatrix<f64>,
}

fn e_step(stats: &Suffstats, loading: &DMatrix<f64>, residual: &DMatrix<f64>) -> Result<EStep> {
    let d = stats.dim;
    let k = loading.ncols();
    let rchol = cholesky(residual.clone(), "residual covariance")?;
    let sinv_f = rchol.solve(loading);
    let ft_sinv_f = loading.transpose() * &sinv_f;
    let sinv_scatter = rchol.solve(&stats.scatter);

    let mut ll = -0.5 * (stats.total as f64 * (d as f64 * LN_2PI + log_det(&rchol)) + sinv_scatter.trace());
    let mut cross = DMatrix::zeros(d, k);
    let mut second = DMatrix::zeros(k, k);
    // Posterior precisions depend only on the utterance count.
    let mut by_count: BTreeMap<usize, (linalg::Chol, DMatrix<f64>)> = BTreeMap::new();
    for spk in &stats.speakers {
        let (chol, cov) = match by_count.entry(spk.count) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let mut p = &ft_sinv_f * spk.count as f64;
                for i in 0..k {
                    p[(i, i)] += 1.0;
                }
                let chol = cholesky(p, "speaker posterior precision")?;
                let cov = chol.inverse();
                e.insert((chol, cov))
            }
        };
        let (chol, cov) = (&*chol, &*cov);
        let m = sinv_f.transpose() * &spk.sum;
        let ey = chol.solve(&m);
        ll += 0.5 * m.dot(&ey) - 0.5 * log_det(chol);
        cross.ger(1.0, &spk.sum, &ey, 1.0);
        let n = spk.count as f64;
        second += cov * n;
        second.ger(n, &ey, &ey, 1.0);
    }
    Ok(EStep {
        log_likelihood: ll,
        cross,
        second,
    })
}

/// Like [`train_em`], also returning the log-likelihood trace.
pub fn train_em_traced(ds: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    if cfg.em_iterations == 0 {
        return Err(Error::invalid("em_iterations must be at least 1"));
    }
    if cfg.variance_floor.is_nan() || cfg.variance_floor <= 0.0 {
        return Err(Error::invalid("variance_floor must be positive"));
    }
    if let Some(v) = validate_dataset(ds).first() {
        return Err(Error::invalid(format!("malformed training data: {v}")));
    }
    if ds.num_speakers() < 2 {
        return Err(Error::invalid("training needs at least 2 speakers"));
    }
    if ds.speakers.values().all(|u| u.len() < 2) {
        return Err(Error::invalid("training needs a speaker with at least 2 utterances"));
    }
    let stats = suffstats(ds);
    let d = stats.dim;
    let k = cfg.speaker_dim.unwrap_or(d);
    if k == 0 || k > d {
        return Err(Error::invalid(format!("speaker dimension {k} not in 1..={d}")));
    }
    let n = stats.total as f64;
    let floor = cfg.variance_floor;

    let total_cov = &stats.scatter / n;
    let (total_eig, _) = sorted_eigen(total_cov);
    if total_eig[0] <= floor {
        return Err(Error::Degenerate(format!(
            "largest total-covariance eigenvalue {:.3e} does not exceed the variance floor",
            total_eig[0]
        )));
    }

    // Initialise from between- and within-class scatter.
    let mut between = DMatrix::zeros(d, d);
    for spk in &stats.speakers {
        let m = &spk.sum / spk.count as f64;
        between.ger(spk.count as f64 / n, &m, &m, 1.0);
    }
    let mut residual = floor_eigenvalues(&stats.scatter / n - &between, floor);
    let (bvals, bvecs) = sorted_eigen(between);
    let mut loading = DMatrix::zeros(d, k);
    for c in 0..k {
        let s = bvals[c].max(floor).sqrt();
        loading.set_column(c, &(bvecs.column(c) * s));
    }

    let mut trace = Vec::with_capacity(cfg.em_iterations + 1);
    for _ in 0..cfg.em_iterations {
        let e = e_step(&stats, &loading, &residual)?;
        trace.push(e.log_likelihood);
        let schol = cholesky(e.second, "speaker second moment")?;
        loading = schol.solve(&e.cross.transpose()).transpose();
        let mut sigma = (&stats.scatter - &loading * e.cross.transpose()) / n;
        linalg::symmetrize(&mut sigma);
        residual = floor_eigenvalues(sigma, floor);
    }
    trace.push(e_step(&stats, &loading, &residual)?.log_likelihood);
    log::debug!("EM log-likelihood trace: {trace:?}");

    let model = PldaModel::from_loading(stats.mean.as_slice().to_vec(), &loading, &residual)?;
    Ok(TrainedModel {
        model,
        log_likelihood: trace,
    })
}
