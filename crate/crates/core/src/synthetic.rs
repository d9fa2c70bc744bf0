//! Synthetic graphs and bandlimited signals for experiments and tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{GftBasis, Graph};
use crate::signal::TimeVaryingSignal;

/// Connected random graph: a random spanning path plus independent extra
/// edges with probability `p`.
pub fn random_connected_graph(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("edge probability {p} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut edges: Vec<(usize, usize)> = perm.windows(2).map(|w| (w[0], w[1])).collect();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, edges)
}

/// Random geometric graph on the unit square: nodes closer than `radius`
/// are joined, plus a spanning path so the graph is connected.
pub fn random_geometric_graph(n: usize, radius: f64, seed: u64) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pts[a].0.total_cmp(&pts[b].0));
    let mut edges: Vec<(usize, usize)> = order.windows(2).map(|w| (w[0], w[1])).collect();
    for i in 0..n {
        for j in i + 1..n {
            let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
            if d < radius {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, edges)
}

/// Parameters of a smooth, bandlimited time-varying signal.
#[derive(Debug, Clone, PartialEq)]
pub struct BandlimitedSpec {
    /// Number of lowest graph frequencies carrying energy.
    pub bandwidth: usize,
    pub n_steps: usize,
    /// Constant added to the DC coefficient.
    pub offset: f64,
    /// Amplitude of each in-band coefficient's oscillation.
    pub amplitude: f64,
    /// Shortest oscillation period in time steps.
    pub min_period: f64,
    pub seed: u64,
}

impl Default for BandlimitedSpec {
    fn default() -> Self {
        Self {
            bandwidth: 5,
            n_steps: 200,
            offset: 0.0,
            amplitude: 3.0,
            min_period: 40.0,
            seed: 0,
        }
    }
}

/// `x[t] = U_B c[t]` where each in-band coefficient follows a slow sinusoid
/// with random phase and period in `[min_period, 4·min_period]`.
pub fn bandlimited_signal(basis: &GftBasis, spec: &BandlimitedSpec) -> Result<TimeVaryingSignal> {
    let n = basis.dim();
    if spec.bandwidth == 0 || spec.bandwidth > n {
        return Err(Error::InvalidArgument(format!(
            "bandwidth {} outside [1, {n}]",
            spec.bandwidth
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = (n as f64).sqrt();
    let waves: Vec<(f64, f64, f64)> = (0..spec.bandwidth)
        .map(|_| {
            let amp = spec.amplitude * scale * rng.random_range(0.5..1.0);
            let period = spec.min_period * rng.random_range(1.0..4.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (amp, period, phase)
        })
        .collect();
    let u = basis.eigenvectors();
    let mut values = DMatrix::zeros(n, spec.n_steps);
    for t in 0..spec.n_steps {
        let mut coeffs = DVector::zeros(n);
        for (k, &(amp, period, phase)) in waves.iter().enumerate() {
            coeffs[k] = amp * (std::f64::consts::TAU * t as f64 / period + phase).sin();
        }
        coeffs[0] += spec.offset * scale;
        values.set_column(t, &(u * coeffs));
    }
    TimeVaryingSignal::new(values)
}
