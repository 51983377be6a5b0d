//! Pool-based active learning for imbalanced binary text-style problems.
//!
//! * [`svm`]: linear soft-margin SVM with class-dependent cost factors
//!   (`C₊ = PA·C₋`), trained by SMO.
//! * [`active`]: closest-to-hyperplane batch selection with PA fixed from a
//!   small initial labeled set.
//! * [`stopping`]: stop when predictions on a fixed unlabeled sample stop
//!   changing (Cohen's kappa between consecutive models).
//! * [`harness`]: k-fold learning curves, AL against random sampling.

pub mod active;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod stopping;
pub mod svm;
pub mod synth;

pub use active::{
    AlConfig, AlSettings, ActiveLearner, Oracle, PaCandidate, RunTrace, SimulatedOracle, Strategy,
};
pub use dataset::{Dataset, Label, LabeledInstance, SparseVector};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ExperimentReport, LearningCurve};
pub use metrics::Metrics;
pub use stopping::{StopConfig, StoppingState};
pub use svm::{SvmModel, TrainConfig};
pub use synth::SynthConfig;
