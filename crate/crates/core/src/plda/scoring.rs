use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::PldaModel;
use crate::embedding::{EmbeddingArchive, Trial, UncertainEmbedding};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, cholesky, gaussian_log_density};
use crate::metrics::{ScoreSet, ScoredTrial};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoringMode {
    /// Traditional PLDA; embedding uncertainties are ignored.
    Plda,
    /// Uncertainty-propagated PLDA.
    #[default]
    UpPlda,
}

impl std::str::FromStr for ScoringMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plda" => Ok(ScoringMode::Plda),
            "up-plda" => Ok(ScoringMode::UpPlda),
            other => Err(format!("unknown scoring mode `{other}` (expected plda or up-plda)")),
        }
    }
}

/// Predictive distribution of a test embedding given one enrollment, in the
/// model basis and relative to the model mean.
///
/// The mean is `F M_e` and `speaker_cov` is `F L_e⁻¹ Fᵀ`; the full predictive
/// covariance adds the test-side within-speaker covariance, see
/// [`ConditionalPredictive::covariance`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPredictive {
    mean: DVector<f64>,
    speaker_cov: DMatrix<f64>,
}

impl ConditionalPredictive {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn speaker_cov(&self) -> &DMatrix<f64> {
        &self.speaker_cov
    }

    /// `Σ_cond = F L_e⁻¹ Fᵀ + Φ_W,t`.
    pub fn covariance(&self, test_within: &DMatrix<f64>) -> DMatrix<f64> {
        &self.speaker_cov + test_within
    }

    /// `log N(φ_t | M_cond, Σ_cond) − log N(φ_t | μ, Φ_tot,t)`.
    pub fn log_likelihood_ratio(&self, model: &PldaModel, test: &UncertainEmbedding) -> Result<f64> {
        let xt = model.project(test.vector())?;
        let wt = model.within_cov(&test.uncertainty)?;
        let numerator = {
            let chol = cholesky(self.covariance(&wt), "conditional predictive covariance")?;
            gaussian_log_density(&chol, &(&xt - &self.mean))
        };
        let denominator = {
            let mut tot = wt;
            for i in 0..model.dim() {
                tot[(i, i)] += model.between[i];
            }
            let chol = cholesky(tot, "test total covariance")?;
            gaussian_log_density(&chol, &xt)
        };
        Ok(numerator - denominator)
    }
}

impl PldaModel {
    /// Marginal log-density `log N(φ | μ, Φ_B + Σ + Φ_U)` in embedding space.
    pub fn marginal_loglik(&self, e: &UncertainEmbedding) -> Result<f64> {
        let x = self.project(e.vector())?;
        let mut tot = self.within_cov(&e.uncertainty)?;
        for i in 0..self.dim() {
            tot[(i, i)] += self.between[i];
        }
        let chol = cholesky(tot, "total covariance")?;
        Ok(gaussian_log_density(&chol, &x) + self.log_abs_det_transform)
    }

    /// Enrollment-side predictive through the speaker posterior:
    /// `L_e = I + Fᵀ Φ_W,e⁻¹ F`, `M_e = L_e⁻¹ Fᵀ Φ_W,e⁻¹ (φ_e − μ)`.
    pub fn conditional_predictive(&self, enroll: &UncertainEmbedding) -> Result<ConditionalPredictive> {
        let xe = self.project(enroll.vector())?;
        let we = cholesky(
            self.within_cov(&enroll.uncertainty)?,
            "enrollment within-speaker covariance",
        )?;
        let f = self.basis_loading();
        let g = we.solve(&f);
        let mut precision = f.transpose() * &g;
        for i in 0..self.speaker_dim {
            precision[(i, i)] += 1.0;
        }
        let lchol = cholesky(precision, "speaker posterior precision")?;
        let posterior_mean = lchol.solve(&(g.transpose() * &xe));
        let mean = &f * posterior_mean;
        let mut speaker_cov = &f * lchol.solve(&f.transpose());
        linalg::symmetrize(&mut speaker_cov);
        Ok(ConditionalPredictive { mean, speaker_cov })
    }

    /// The same predictive through the two-covariance form
    /// `M_cond = Φ_B Φ_tot,e⁻¹ (φ_e − μ)`, `F L_e⁻¹ Fᵀ = Φ_B − Φ_B Φ_tot,e⁻¹ Φ_B`.
    pub fn conditional_predictive_woodbury(&self, enroll: &UncertainEmbedding) -> Result<ConditionalPredictive> {
        let xe = self.project(enroll.vector())?;
        let mut tot = self.within_cov(&enroll.uncertainty)?;
        for i in 0..self.dim() {
            tot[(i, i)] += self.between[i];
        }
        let chol = cholesky(tot, "enrollment total covariance")?;
        let b = DMatrix::from_diagonal(&self.between);
        // H = Φ_tot,e⁻¹ Φ_B, so Φ_B Φ_tot,e⁻¹ = Hᵀ.
        let h = chol.solve(&b);
        let mean = h.transpose() * xe;
        let mut speaker_cov = &b - &b * &h;
        linalg::symmetrize(&mut speaker_cov);
        Ok(ConditionalPredictive { mean, speaker_cov })
    }

    /// Uncertainty-propagated LLR. Zero uncertainties give the traditional PLDA score.
    pub fn score_llr(&self, enroll: &UncertainEmbedding, test: &UncertainEmbedding) -> Result<f64> {
        self.conditional_predictive(enroll)?.log_likelihood_ratio(self, test)
    }

    /// [`score_llr`](Self::score_llr) through the two-covariance predictive.
    pub fn score_llr_woodbury(&self, enroll: &UncertainEmbedding, test: &UncertainEmbedding) -> Result<f64> {
        self.conditional_predictive_woodbury(enroll)?
            .log_likelihood_ratio(self, test)
    }

    /// Traditional PLDA LLR, evaluated per dimension of the diagonal basis.
    pub fn score_plda(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        let xe = self.project(enroll)?;
        let xt = self.project(test)?;
        let mut llr = 0.0;
        for i in 0..self.dim() {
            let (b, w) = (self.between[i], self.residual[i]);
            let t = b + w;
            // t² − b², factored for accuracy when b ≫ w
            let det = w * (w + 2.0 * b);
            let (e, s) = (xe[i], xt[i]);
            llr += -0.5 * det.ln() + t.ln() - 0.5 * (t * e * e - 2.0 * b * e * s + t * s * s) / det
                + 0.5 * (e * e + s * s) / t;
        }
        Ok(llr)
    }

    pub fn score(&self, enroll: &UncertainEmbedding, test: &UncertainEmbedding, mode: ScoringMode) -> Result<f64> {
        match mode {
            ScoringMode::Plda => self.score_plda(enroll.vector(), test.vector()),
            ScoringMode::UpPlda => self.score_llr(enroll, test),
        }
    }
}

/// Scores every trial against `archive`, in trial order.
///
/// Enrollment-side predictives are computed once per distinct enrollment id;
/// every score is bit-identical to the corresponding [`PldaModel::score`] call
/// regardless of the number of rayon workers.
pub fn score_batch(
    model: &PldaModel,
    archive: &EmbeddingArchive,
    trials: &[Trial],
    mode: ScoringMode,
) -> Result<ScoreSet> {
    check_dim(model.dim(), archive.dim())?;
    if mode == ScoringMode::UpPlda && !archive.has_uncertainty() {
        return Err(Error::NoUncertainty);
    }
    let mut resolved = Vec::with_capacity(trials.len());
    for (index, trial) in trials.iter().enumerate() {
        let lookup = |id: &str| {
            archive.get(id).ok_or_else(|| Error::UnresolvedId {
                index,
                enroll: trial.enroll.clone(),
                test: trial.test.clone(),
                id: id.to_owned(),
            })
        };
        resolved.push((lookup(&trial.enroll)?, lookup(&trial.test)?));
    }

    let scores: Vec<f64> = match mode {
        ScoringMode::Plda => resolved
            .par_iter()
            .map(|(e, t)| model.score_plda(e.vector(), t.vector()))
            .collect::<Result<_>>()?,
        ScoringMode::UpPlda => {
            let mut slots: HashMap<&str, usize> = HashMap::new();
            let mut unique: Vec<&UncertainEmbedding> = Vec::new();
            for (e, _) in &resolved {
                slots.entry(e.id()).or_insert_with(|| {
                    unique.push(e);
                    unique.len() - 1
                });
            }
            let predictives: Vec<ConditionalPredictive> = unique
                .par_iter()
                .map(|e| model.conditional_predictive(e))
                .collect::<Result<_>>()?;
            resolved
                .par_iter()
                .map(|(e, t)| predictives[slots[e.id()]].log_likelihood_ratio(model, t))
                .collect::<Result<_>>()?
        }
    };

    Ok(ScoreSet::new(
        trials
            .iter()
            .zip(scores)
            .map(|(trial, score)| ScoredTrial {
                trial: trial.clone(),
                score,
            })
            .collect(),
    ))
}
