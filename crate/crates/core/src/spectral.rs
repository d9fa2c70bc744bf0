//! Trainable spectral graph filter.
//!
//! The filter holds one free gain per graph frequency and acts on a signal
//! through the graph convolution `U diag(h) Uᵀ x`. Gains are learned online,
//! one training snapshot at a time, by subgradient descent on the per-snapshot
//! mean absolute error, then frozen and used to denoise incoming observations.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GftBasis;
use crate::signal::{Observation, ObservationModel, TimeVaryingSignal};

/// Offset mixed into the run seed so training noise never reuses a test-time stream.
const TRAIN_SEED_SALT: u64 = 0x5851_f42d_4c95_7f2d;

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// Relative size below which a residual's sign is taken as 0.
pub const SIGN_DEAD_ZONE: f64 = 1e-12;

/// `U diag(h) Uᵀ x`.
pub fn graph_convolve(basis: &GftBasis, gains: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(basis.dim(), gains.len())?;
    check_len(basis.dim(), x.len())?;
    let coeffs = basis.forward(x).component_mul(gains);
    Ok(basis.inverse(&coeffs))
}

/// Mean absolute error `(1/N) Σ |a_n - b_n|`.
pub fn mae(truth: &DVector<f64>, estimate: &DVector<f64>) -> Result<f64> {
    check_len(truth.len(), estimate.len())?;
    if truth.is_empty() {
        return Err(Error::InvalidArgument("empty vectors".into()));
    }
    let total: f64 = truth.iter().zip(estimate.iter()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / truth.len() as f64)
}

/// Subgradient of `mae(truth, U diag(h) Uᵀ x)` with respect to the gains:
/// `g_k = (1/N) (Uᵀs)_k (Uᵀx)_k` where `s = sign(x̃ - truth)` and `sign(0) = 0`
/// (with round-off-sized residuals treated as 0).
pub fn mae_gradient(
    basis: &GftBasis,
    gains: &DVector<f64>,
    x: &DVector<f64>,
    truth: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len(basis.dim(), truth.len())?;
    let spectrum = {
        check_len(basis.dim(), gains.len())?;
        check_len(basis.dim(), x.len())?;
        basis.forward(x)
    };
    let filtered = basis.inverse(&spectrum.component_mul(gains));
    let signs = DVector::from_iterator(
        truth.len(),
        filtered.iter().zip(truth.iter()).map(|(f, t)| {
            // residuals at round-off level count as exact, else float noise
            // at the optimum turns into full-size random subgradients
            let d = f - t;
            if d.abs() <= SIGN_DEAD_ZONE * (1.0 + t.abs()) {
                0.0
            } else {
                d.signum()
            }
        }),
    );
    let n = truth.len() as f64;
    Ok(basis.forward(&signs).component_mul(&spectrum) / n)
}

/// Hyperparameters for filter training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Consecutive non-improving steps tolerated before stopping.
    pub patience: usize,
    /// Minimum decrease of the best windowed MAE that counts as improvement.
    pub tol: f64,
    pub augment_copies: usize,
    /// Length of the running window used for early stopping.
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_iters: 10_000,
            patience: 10,
            tol: 1e-4,
            augment_copies: 1,
            window: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("train: {msg}")));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            // η = 0 is accepted: it freezes the identity filter.
            return bad("learning_rate must be finite and nonnegative");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.tol >= 0.0) {
            return bad("tol must be nonnegative");
        }
        if self.augment_copies == 0 {
            return bad("augment_copies must be at least 1");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        Ok(())
    }
}

/// Per-frequency gains bound to the basis they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFilter {
    gains: DVector<f64>,
    basis_ref: String,
}

impl SpectralFilter {
    /// All-ones gains: the identity filter.
    pub fn identity(basis: &GftBasis) -> Self {
        Self {
            gains: DVector::from_element(basis.dim(), 1.0),
            basis_ref: basis.fingerprint().to_string(),
        }
    }

    pub fn from_gains(basis: &GftBasis, gains: DVector<f64>) -> Result<Self> {
        check_len(basis.dim(), gains.len())?;
        if gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("filter gains must be finite".into()));
        }
        Ok(Self {
            gains,
            basis_ref: basis.fingerprint().to_string(),
        })
    }

    pub fn gains(&self) -> &DVector<f64> {
        &self.gains
    }

    pub fn basis_ref(&self) -> &str {
        &self.basis_ref
    }

    pub fn is_identity(&self) -> bool {
        self.gains.iter().all(|&g| g == 1.0)
    }

    fn check_basis(&self, basis: &GftBasis) -> Result<()> {
        if self.basis_ref != basis.fingerprint() {
            return Err(Error::InvalidArgument(format!(
                "filter trained on basis {} applied to basis {}",
                self.basis_ref,
                basis.fingerprint()
            )));
        }
        Ok(())
    }

    /// Fills the missing entries of `obs` from `fill` and applies the filter.
    /// Identity gains pass the filled vector through untouched.
    pub fn denoise(&self, basis: &GftBasis, obs: &Observation, fill: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_basis(basis)?;
        check_len(basis.dim(), obs.len())?;
        let x = obs.filled(fill)?;
        if self.is_identity() {
            return Ok(x);
        }
        graph_convolve(basis, &self.gains, &x)
    }
}

/// Why training halted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIters,
    SamplesExhausted,
    EarlyStopped,
}

/// A trained filter with its per-step MAE trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub filter: SpectralFilter,
    /// MAE of the current gains on each training snapshot, before the update.
    pub trace: Vec<f64>,
    pub stop: StopReason,
}

impl TrainOutcome {
    /// Mean MAE over the last `window` steps of the trace.
    pub fn final_window_mae(&self, window: usize) -> f64 {
        let w = window.clamp(1, self.trace.len().max(1));
        let tail = &self.trace[self.trace.len().saturating_sub(w)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Trains per-frequency gains on a ground-truth training signal.
///
/// Each step takes one (augmented) training snapshot, corrupts it with the
/// run's observation model, fills missing nodes with their training-set mean,
/// and applies one subgradient step `h ← h - η ∇h MAE`. Gains start at one.
pub fn train_filter(
    basis: &GftBasis,
    train: &TimeVaryingSignal,
    model: &ObservationModel,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_len(basis.dim(), train.n_nodes())?;
    check_len(basis.dim(), model.n_nodes())?;

    let samples = train.augment_by_concatenation(cfg.augment_copies)?;
    let fill = train.node_means();
    let corrupt = model.clone().with_seed(model.seed() ^ TRAIN_SEED_SALT);

    let mut gains = DVector::from_element(basis.dim(), 1.0);
    let mut trace = Vec::new();
    let mut best_window = f64::INFINITY;
    let mut window_sum = 0.0;
    let mut stalled = 0;
    let mut stop = if cfg.max_iters < samples.n_steps() {
        StopReason::MaxIters
    } else {
        StopReason::SamplesExhausted
    };

    for step in 0..cfg.max_iters.min(samples.n_steps()) {
        let truth = samples.column(step);
        let x = corrupt.observe(&truth, step as u64)?.filled(&fill)?;
        let filtered = graph_convolve(basis, &gains, &x)?;
        let err = mae(&truth, &filtered)?;
        trace.push(err);

        let grad = mae_gradient(basis, &gains, &x, &truth)?;
        gains.axpy(-cfg.learning_rate, &grad, 1.0);
        if gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, trace });
        }

        window_sum += err;
        if trace.len() > cfg.window {
            window_sum -= trace[trace.len() - 1 - cfg.window];
        }
        if trace.len() >= cfg.window {
            let current = window_sum / cfg.window as f64;
            if current < best_window - cfg.tol {
                best_window = current;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= cfg.patience {
                    stop = StopReason::EarlyStopped;
                    break;
                }
            }
        }
    }
    log::debug!("filter training stopped after {} steps ({:?})", trace.len(), stop);

    Ok(TrainOutcome {
        filter: SpectralFilter {
            gains,
            basis_ref: basis.fingerprint().to_string(),
        },
        trace,
        stop,
    })
}

/// JSON export of a trained filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterFile {
    pub basis_ref: String,
    pub gains: Vec<f64>,
    pub train_config: TrainConfig,
    pub final_mae: f64,
}

impl FilterFile {
    pub fn new(outcome: &TrainOutcome, cfg: &TrainConfig) -> Self {
        Self {
            basis_ref: outcome.filter.basis_ref.clone(),
            gains: outcome.filter.gains.iter().copied().collect(),
            train_config: cfg.clone(),
            final_mae: outcome.final_window_mae(cfg.window),
        }
    }

    /// Rebinds the stored gains to `basis`, refusing a mismatched basis.
    pub fn into_filter(self, basis: &GftBasis) -> Result<SpectralFilter> {
        let filter = SpectralFilter::from_gains(basis, DVector::from_vec(self.gains))?;
        if self.basis_ref != basis.fingerprint() {
            return Err(Error::InvalidArgument(format!(
                "filter file was trained on basis {}, current basis is {}",
                self.basis_ref,
                basis.fingerprint()
            )));
        }
        Ok(filter)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
