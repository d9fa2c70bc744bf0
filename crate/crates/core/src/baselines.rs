//! Online reference estimators: graph LMS/NLMS adaptive filters and two
//! naive predictors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GftBasis, Graph};
use crate::signal::{Observation, TimeVaryingSignal};

/// Regulariser of the GNLMS per-frequency normalisation.
pub const NLMS_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    LastValue,
    NeighborMean,
    Glms,
    Gnlms,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [
        Baseline::LastValue,
        Baseline::NeighborMean,
        Baseline::Glms,
        Baseline::Gnlms,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Baseline::LastValue => "last-value",
            Baseline::NeighborMean => "neighbor-mean",
            Baseline::Glms => "glms",
            Baseline::Gnlms => "gnlms",
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.label() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown baseline {s:?}")))
    }
}

/// Smallest number of lowest frequencies holding at least `fraction` of the
/// signal's total spectral energy over all time steps.
pub fn bandwidth_for_energy(basis: &GftBasis, signal: &TimeVaryingSignal, fraction: f64) -> Result<usize> {
    if signal.n_nodes() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            found: signal.n_nodes(),
        });
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "energy fraction {fraction} outside (0, 1]"
        )));
    }
    let coeffs = basis.eigenvectors().tr_mul(signal.values());
    let energy: Vec<f64> = coeffs.row_iter().map(|row| row.norm_squared()).collect();
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        return Ok(1);
    }
    let mut acc = 0.0;
    for (k, e) in energy.iter().enumerate() {
        acc += e;
        if acc >= fraction * total * (1.0 - 1e-12) {
            return Ok(k + 1);
        }
    }
    Ok(basis.dim())
}

/// Estimate and precomputed operators of a graph LMS-type filter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveFilterState {
    estimate: DVector<f64>,
    step_size: f64,
    /// First `F` Fourier modes, `N × F`.
    band_basis: DMatrix<f64>,
    /// `B = U_F U_Fᵀ`.
    band_projector: DMatrix<f64>,
    /// Per-frequency innovation scaling (GNLMS); length `F`.
    normalization: DVector<f64>,
}

impl AdaptiveFilterState {
    pub fn new(basis: &GftBasis, bandwidth: usize, step_size: f64, initial: DVector<f64>) -> Result<Self> {
        let n = basis.dim();
        if bandwidth == 0 || bandwidth > n {
            return Err(Error::InvalidArgument(format!(
                "bandwidth {bandwidth} outside [1, {n}]"
            )));
        }
        if initial.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: initial.len(),
            });
        }
        if !(step_size >= 0.0) || !step_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step size {step_size} must be nonnegative"
            )));
        }
        let band_basis = basis.eigenvectors().columns(0, bandwidth).into_owned();
        let band_projector = &band_basis * band_basis.transpose();
        Ok(Self {
            estimate: initial,
            step_size,
            band_basis,
            band_projector,
            normalization: DVector::from_element(bandwidth, 1.0),
        })
    }

    /// GNLMS state: each in-band frequency's step is scaled by
    /// `1 / (‖M u_k‖² + ε)`, the inverse of the sampled energy of that mode.
    pub fn normalized(
        basis: &GftBasis,
        bandwidth: usize,
        step_size: f64,
        initial: DVector<f64>,
        observed: &[bool],
    ) -> Result<Self> {
        let mut state = Self::new(basis, bandwidth, step_size, initial)?;
        if observed.len() != basis.dim() {
            return Err(Error::DimensionMismatch {
                expected: basis.dim(),
                found: observed.len(),
            });
        }
        let norm = DVector::from_fn(bandwidth, |k, _| {
            let sampled: f64 = state
                .band_basis
                .column(k)
                .iter()
                .zip(observed)
                .filter(|(_, &o)| o)
                .map(|(u, _)| u * u)
                .sum();
            1.0 / (sampled + NLMS_EPSILON)
        });
        state.normalization = norm;
        Ok(state)
    }

    pub fn with_normalization(mut self, normalization: DVector<f64>) -> Result<Self> {
        if normalization.len() != self.bandwidth() {
            return Err(Error::DimensionMismatch {
                expected: self.bandwidth(),
                found: normalization.len(),
            });
        }
        self.normalization = normalization;
        Ok(self)
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.estimate
    }

    /// Replaces the running estimate, e.g. when resuming from a checkpoint.
    pub fn set_estimate(&mut self, estimate: DVector<f64>) -> Result<()> {
        if estimate.len() != self.estimate.len() {
            return Err(Error::DimensionMismatch {
                expected: self.estimate.len(),
                found: estimate.len(),
            });
        }
        self.estimate = estimate;
        Ok(())
    }

    pub fn bandwidth(&self) -> usize {
        self.band_basis.ncols()
    }

    pub fn band_projector(&self) -> &DMatrix<f64> {
        &self.band_projector
    }

    pub fn normalization(&self) -> &DVector<f64> {
        &self.normalization
    }

    /// `M (o - x̂)`, zero at unobserved nodes.
    fn innovation(&self, obs: &Observation) -> Result<DVector<f64>> {
        let n = self.estimate.len();
        if obs.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: obs.len(),
            });
        }
        Ok(DVector::from_iterator(
            n,
            obs.values
                .iter()
                .zip(self.estimate.iter())
                .map(|(o, x)| o.map_or(0.0, |o| o - x)),
        ))
    }

    /// `x̂ ← x̂ + μ B M (o - x̂)`.
    pub fn glms_step(&mut self, obs: &Observation) -> Result<&DVector<f64>> {
        let e = self.innovation(obs)?;
        self.estimate += &self.band_projector * e * self.step_size;
        Ok(&self.estimate)
    }

    /// `x̂ ← x̂ + μ U_F diag(ν) U_Fᵀ M (o - x̂)`.
    pub fn gnlms_step(&mut self, obs: &Observation) -> Result<&DVector<f64>> {
        let e = self.innovation(obs)?;
        let spectral = self.band_basis.tr_mul(&e).component_mul(&self.normalization);
        self.estimate += &self.band_basis * spectral * self.step_size;
        Ok(&self.estimate)
    }
}

/// Observed nodes take `o[t]`; unobserved nodes keep their previous value.
pub fn last_value_step(estimate: &DVector<f64>, obs: &Observation) -> Result<DVector<f64>> {
    obs.filled(estimate)
}

/// Observed nodes take `o[t]`; unobserved nodes take the mean of their
/// observed neighbours, or keep their previous value when they have none.
pub fn neighbor_mean_step(estimate: &DVector<f64>, obs: &Observation, graph: &Graph) -> Result<DVector<f64>> {
    let n = graph.n_nodes();
    if obs.len() != n || estimate.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: if obs.len() != n { obs.len() } else { estimate.len() },
        });
    }
    let mut out = obs.filled(estimate)?;
    for i in 0..n {
        if obs.get(i).is_some() {
            continue;
        }
        let vals: Vec<f64> = graph.neighbors(i)?.into_iter().filter_map(|j| obs.get(j)).collect();
        if !vals.is_empty() {
            out[i] = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    Ok(out)
}
