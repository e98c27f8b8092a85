//! PLDA model, EM training, and the traditional and uncertainty-propagated
//! log-likelihood-ratio scoring functions.
//!
//! An utterance `r` with diagonal posterior covariance `Φ_U,r` has the
//! within-speaker covariance `Φ_W,r = Σ + Φ_U,r`, so its total covariance
//! `Φ_tot,r = Φ_B + Φ_W,r` is utterance dependent. The trial score is
//!
//! ```text
//! s(e, t) = log N(φ_t | M_cond, Σ_cond) − log N(φ_t | μ, Φ_tot,t)
//! ```
//!
//! where `(M_cond, Σ_cond)` is the predictive distribution of the test
//! embedding given the enrollment. With `Φ_U ≡ 0` this is the traditional
//! PLDA score. All scoring happens on centred embeddings.

mod model;
mod scoring;
mod train;

pub use model::PldaModel;
pub use scoring::{score_batch, ConditionalPredictive, ScoringMode};
pub use train::{train_em, train_em_traced, TrainConfig, TrainedModel};
