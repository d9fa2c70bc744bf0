//! Time-varying node signals and the masked, noisy observation model.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orientation of a signal CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// One row per node, one column per time step.
    NodesAsRows,
    /// One row per time step, one column per node.
    NodesAsColumns,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nodes-as-rows" | "rows" => Ok(Layout::NodesAsRows),
            "nodes-as-columns" | "columns" => Ok(Layout::NodesAsColumns),
            other => Err(Error::InvalidArgument(format!("unknown layout {other:?}"))),
        }
    }
}

/// An `N × T` matrix of node signals, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeVaryingSignal {
    values: DMatrix<f64>,
    t0: i64,
    step_label: String,
}

impl TimeVaryingSignal {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "signal must be at least 1x1, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let n = values.nrows();
            return Err(Error::InvalidArgument(format!(
                "non-finite value at node {}, time {}",
                pos % n,
                pos / n
            )));
        }
        Ok(Self {
            values,
            t0: 0,
            step_label: String::new(),
        })
    }

    pub fn with_time(mut self, t0: i64, step_label: impl Into<String>) -> Self {
        self.t0 = t0;
        self.step_label = step_label.into();
        self
    }

    pub fn n_nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    pub fn step_label(&self) -> &str {
        &self.step_label
    }

    /// Signal snapshot `x[t]` across all nodes.
    pub fn column(&self, t: usize) -> DVector<f64> {
        self.values.column(t).into_owned()
    }

    /// Per-node mean over time.
    pub fn node_means(&self) -> DVector<f64> {
        let t = self.n_steps() as f64;
        DVector::from_fn(self.n_nodes(), |i, _| self.values.row(i).sum() / t)
    }

    /// Splits into columns `[0, t_split)` and `[t_split, T)`.
    pub fn split(&self, t_split: usize) -> Result<(Self, Self)> {
        let t = self.n_steps();
        if t_split == 0 || t_split >= t {
            return Err(Error::InvalidArgument(format!(
                "t_split must lie in [1, {t}), got {t_split}"
            )));
        }
        let train = Self {
            values: self.values.columns(0, t_split).into_owned(),
            t0: self.t0,
            step_label: self.step_label.clone(),
        };
        let test = Self {
            values: self.values.columns(t_split, t - t_split).into_owned(),
            t0: self.t0 + t_split as i64,
            step_label: self.step_label.clone(),
        };
        Ok((train, test))
    }

    /// Tiles the signal `copies` times along the time axis.
    pub fn augment_by_concatenation(&self, copies: usize) -> Result<Self> {
        if copies == 0 {
            return Err(Error::InvalidArgument("copies must be at least 1".into()));
        }
        let t = self.n_steps();
        let values = DMatrix::from_fn(self.n_nodes(), t * copies, |i, c| self.values[(i, c % t)]);
        Ok(Self {
            values,
            t0: self.t0,
            step_label: self.step_label.clone(),
        })
    }
}

/// Reads a headerless numeric CSV. Every cell must parse as a finite number.
pub fn load_signal_csv(path: &Path, layout: Layout) -> Result<TimeVaryingSignal> {
    let ingest = |row: usize, col: usize, msg: String| Error::Ingest {
        path: path.to_path_buf(),
        row,
        col,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::File {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ingest(r, 0, e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let parsed = record
            .iter()
            .enumerate()
            .map(|(c, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(ingest(r, c, format!("non-finite value {cell:?}"))),
                Err(_) if cell.is_empty() => Err(ingest(r, c, "empty cell".into())),
                Err(_) => Err(ingest(r, c, format!("not a number: {cell:?}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if parsed.len() != first.len() {
                return Err(ingest(
                    r,
                    parsed.len().min(first.len()),
                    format!("ragged row: {} cells, expected {}", parsed.len(), first.len()),
                ));
            }
        }
        rows.push(parsed);
    }
    if rows.is_empty() {
        return Err(Error::File {
            path: path.to_path_buf(),
            msg: "empty signal file".into(),
        });
    }
    let (nr, nc) = (rows.len(), rows[0].len());
    let values = match layout {
        Layout::NodesAsRows => DMatrix::from_fn(nr, nc, |i, j| rows[i][j]),
        Layout::NodesAsColumns => DMatrix::from_fn(nc, nr, |i, j| rows[j][i]),
    };
    TimeVaryingSignal::new(values)
}

/// Writes a signal as headerless CSV, one row per node.
pub fn write_signal_csv(path: &Path, signal: &TimeVaryingSignal) -> Result<()> {
    let mut out = String::new();
    for row in signal.values().row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A fixed observed-node mask plus additive Gaussian noise settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    observed: Vec<bool>,
    noise_variance: f64,
    seed: u64,
    ratio: f64,
}

/// Stream id reserved for mask sampling so it never collides with a time index.
const MASK_STREAM: u64 = u64::MAX;

impl ObservationModel {
    pub fn new(observed: Vec<bool>, noise_variance: f64, seed: u64) -> Result<Self> {
        if !observed.iter().any(|&o| o) {
            return Err(Error::InvalidArgument("at least one node must be observed".into()));
        }
        if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be finite and nonnegative, got {noise_variance}"
            )));
        }
        let ratio = observed.iter().filter(|&&o| o).count() as f64 / observed.len() as f64;
        Ok(Self {
            observed,
            noise_variance,
            seed,
            ratio,
        })
    }

    /// Samples exactly `round(ratio·n)` observed nodes uniformly without
    /// replacement. Noise variance starts at zero.
    pub fn sample(n: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "observation ratio must lie in (0, 1], got {ratio}"
            )));
        }
        let count = (ratio * n as f64).round() as usize;
        if count == 0 {
            return Err(Error::InvalidArgument(format!(
                "ratio {ratio} observes no node out of {n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(MASK_STREAM);
        let mut observed = vec![false; n];
        for i in sample(&mut rng, n, count) {
            observed[i] = true;
        }
        Ok(Self {
            observed,
            noise_variance: 0.0,
            seed,
            ratio,
        })
    }

    pub fn with_noise(mut self, noise_variance: f64) -> Result<Self> {
        if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be finite and nonnegative, got {noise_variance}"
            )));
        }
        self.noise_variance = noise_variance;
        Ok(self)
    }

    /// Same mask and noise level, different noise stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn n_nodes(&self) -> usize {
        self.observed.len()
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.observed[i]
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| self.observed[i]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| !self.observed[i]).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Nominal observation ratio (the sampled ratio, or the realised one for
    /// explicit masks).
    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Draws `o[t] = M(x[t] + ε[t])`. The noise stream is keyed by
    /// `(seed, t)`, so any time step can be replayed independently.
    pub fn observe(&self, x: &DVector<f64>, t: u64) -> Result<Observation> {
        let n = self.n_nodes();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: x.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(t);
        let normal = Normal::new(0.0, self.noise_variance.sqrt()).map_err(|e| Error::Numeric(e.to_string()))?;
        let values = x
            .iter()
            .zip(&self.observed)
            .map(|(&v, &obs)| {
                // Noise is drawn for every node so the stream does not depend on the mask.
                let eps = normal.sample(&mut rng);
                obs.then_some(v + eps)
            })
            .collect();
        Ok(Observation { t, values })
    }

    pub fn to_mask_file(&self) -> MaskFile {
        MaskFile {
            n: self.n_nodes(),
            observed_indices: self.observed_indices(),
            ratio: self.ratio,
            seed: self.seed,
        }
    }

    pub fn from_mask_file(mask: &MaskFile) -> Result<Self> {
        let mut observed = vec![false; mask.n];
        for &i in &mask.observed_indices {
            if i >= mask.n {
                return Err(Error::NodeOutOfRange { index: i, n: mask.n });
            }
            observed[i] = true;
        }
        let mut model = Self::new(observed, 0.0, mask.seed)?;
        model.ratio = mask.ratio;
        Ok(model)
    }
}

/// JSON form of an observation mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub n: usize,
    pub observed_indices: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One observation `o[t]`; `None` marks an unobserved node.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: u64,
    pub values: Vec<Option<f64>>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.values[i]
    }

    /// Dense vector with missing entries taken from `fill`.
    pub fn filled(&self, fill: &DVector<f64>) -> Result<DVector<f64>> {
        if fill.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: fill.len(),
            });
        }
        Ok(DVector::from_iterator(
            self.len(),
            self.values.iter().zip(fill.iter()).map(|(v, f)| v.unwrap_or(*f)),
        ))
    }
}
