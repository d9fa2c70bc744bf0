//! Online reconstruction of time-varying graph signals from partial, noisy
//! observations.
//!
//! A spectral graph filter trained on historical data denoises each new
//! observation; a language-model predictor (or the deterministic mock)
//! fills in the unobserved nodes from their previous value and their
//! observed neighbours. Graph-signal-processing baselines (GLMS, GNLMS) and
//! naive predictors run on the same observation stream for comparison.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod online;
pub mod predictor;
pub mod prompt;
pub mod signal;
pub mod spectral;
pub mod synthetic;

pub use baselines::{AdaptiveFilterState, Baseline};
pub use error::{Error, Result};
pub use graph::{Edge, GftBasis, Graph};
pub use metrics::{MeanStd, RepeatTrace, ReportFormat, RunReport};
pub use online::{Experiment, Method, OnlineState, RepeatRunner, RunConfig, RunSettings};
pub use predictor::{CompletionBackend, MockBackend, PredictionResult, PredictorConfig, RemoteBackend, TransportError};
pub use prompt::{NodeTask, PromptPair, SYSTEM_PROMPT};
pub use signal::{Layout, MaskFile, Observation, ObservationModel, TimeVaryingSignal};
pub use spectral::{FilterFile, SpectralFilter, TrainConfig};
