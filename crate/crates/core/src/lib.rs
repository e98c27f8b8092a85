//! Probabilistic linear discriminant analysis (PLDA) back-end for speaker
//! verification with per-utterance embedding uncertainty.
//!
//! Embeddings carry a diagonal posterior covariance that is propagated from a
//! Gaussian posterior-inference pooling head ([`pooling`]) into length scaling
//! ([`preprocess`]) and into the PLDA log-likelihood ratio ([`plda`]).
//! [`metrics`] computes EER and minDCF, [`synthetic`] samples data from the
//! generative model and provides Monte-Carlo oracles, and [`storage`] holds
//! the on-disk formats spoken by the `upplda` binary.

pub mod cli;
pub mod embedding;
pub mod error;
mod linalg;
pub mod metrics;
pub mod plda;
pub mod pooling;
pub mod preprocess;
pub mod storage;
pub mod synthetic;

pub use embedding::{
    validate_dataset, Embedding, EmbeddingArchive, LabeledDataset, Trial, TrialLabel, UncertainEmbedding, Violation,
    ViolationKind,
};
pub use error::{Error, Result};
pub use metrics::{eer, min_dcf, DcfParams, ScoreSet, ScoredTrial};
pub use plda::{score_batch, ConditionalPredictive, PldaModel, ScoringMode, TrainConfig};
pub use pooling::{FrameEstimate, GaussianPrior, HeadParams, PosteriorStats};
pub use preprocess::{CenteringStats, LengthScaleForm, StatsSource};
