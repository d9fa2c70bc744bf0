//! The online reconstruction loop and run management.
//!
//! For every test step the loop observes the signal, denoises the
//! observation with the trained spectral filter (missing nodes filled with
//! the previous estimate), asks the predictor for every missing node, and
//! assembles the new estimate. Baselines run through the same observation
//! stream so results are paired.

use std::collections::VecDeque;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{bandwidth_for_energy, last_value_step, neighbor_mean_step, AdaptiveFilterState, Baseline};
use crate::error::{Error, Result};
use crate::graph::{knn_graph, load_coordinates, load_edge_list, median_knn_distance, GftBasis, Graph, GraphSummary};
use crate::metrics::{emit_report, RepeatTrace, ReportFormat, RunReport};
use crate::predictor::{predict_batch, CompletionBackend, PredictionResult, PredictorConfig};
use crate::prompt::{build_task, NodeTask, TranscriptEntry};
use crate::signal::{load_signal_csv, Layout, MaskFile, ObservationModel, TimeVaryingSignal};
use crate::spectral::{train_filter, FilterFile, SpectralFilter, TrainConfig, TrainOutcome};

/// Where the graph comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GraphSource {
    EdgeList {
        path: PathBuf,
    },
    Knn {
        coords: PathBuf,
        k: usize,
        /// Gaussian kernel bandwidth in km; defaults to the median kNN distance.
        #[serde(default)]
        bandwidth: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSource {
    pub path: PathBuf,
    #[serde(default = "default_layout")]
    pub layout: Layout,
    #[serde(default)]
    pub step_label: String,
}

fn default_layout() -> Layout {
    Layout::NodesAsRows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    pub ratio: f64,
    pub seed: u64,
    pub noise_variance: f64,
    /// Explicit mask; overrides `ratio` sampling.
    pub mask_file: Option<PathBuf>,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            ratio: 0.7,
            seed: 0,
            noise_variance: 1.0,
            mask_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    pub step_size: f64,
    /// Fraction of training spectral energy the GLMS/GNLMS band must hold.
    pub energy_fraction: f64,
    /// Fixed band size; overrides `energy_fraction`.
    pub bandwidth: Option<usize>,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            energy_fraction: 0.9,
            bandwidth: None,
        }
    }
}

/// What observed nodes contribute to the new estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservedSource {
    /// The filtered observation `õ[t]`.
    Denoised,
    /// The raw noisy observation `o[t]`.
    Raw,
}

/// Everything a reconstruction run needs that is not data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub observation: ObservationConfig,
    pub train: TrainConfig,
    pub predictor: PredictorConfig,
    pub baselines: Vec<Baseline>,
    pub baseline: BaselineParams,
    pub repeats: usize,
    pub precision: usize,
    /// Number of past estimates shown to the predictor (1 = previous only).
    pub history_depth: usize,
    pub observed_source: ObservedSource,
    pub checkpoint_every: usize,
    /// Caps the number of test steps processed.
    pub max_steps: Option<usize>,
    pub transcript: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            observation: ObservationConfig::default(),
            train: TrainConfig::default(),
            predictor: PredictorConfig::default(),
            baselines: vec![Baseline::LastValue, Baseline::NeighborMean],
            baseline: BaselineParams::default(),
            repeats: 1,
            precision: 1,
            history_depth: 1,
            observed_source: ObservedSource::Denoised,
            checkpoint_every: 100,
            max_steps: None,
            transcript: false,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.predictor.validate()?;
        let o = &self.observation;
        if o.mask_file.is_none() && !(o.ratio > 0.0 && o.ratio <= 1.0) {
            return Err(Error::Config(format!("observation ratio {} outside (0, 1]", o.ratio)));
        }
        if !(o.noise_variance >= 0.0) || !o.noise_variance.is_finite() {
            return Err(Error::Config("noise_variance must be finite and nonnegative".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.history_depth == 0 {
            return Err(Error::Config("history_depth must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if !(self.baseline.step_size >= 0.0) {
            return Err(Error::Config("baseline step_size must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Full configuration file: data sources plus run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub graph: GraphSource,
    pub signal: SignalSource,
    pub t_split: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub settings: RunSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses a config, rejecting unknown top-level keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let settings = serde_json::to_value(RunSettings::default())?;
        if let (Some(obj), Some(known)) = (value.as_object(), settings.as_object()) {
            for key in obj.keys() {
                let ok =
                    matches!(key.as_str(), "graph" | "signal" | "t_split" | "output_dir") || known.contains_key(key);
                if !ok {
                    return Err(Error::Config(format!("unknown field `{key}`")));
                }
            }
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.settings.validate()?;
        let must_exist = |p: &Path| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("file not found: {}", p.display())))
            }
        };
        must_exist(&self.signal.path)?;
        match &self.graph {
            GraphSource::EdgeList { path } => must_exist(path)?,
            GraphSource::Knn { coords, k, bandwidth } => {
                must_exist(coords)?;
                if *k == 0 {
                    return Err(Error::Config("knn k must be positive".into()));
                }
                if bandwidth.is_some_and(|b| !(b > 0.0)) {
                    return Err(Error::Config("knn bandwidth must be positive".into()));
                }
            }
        }
        if let Some(mask) = &self.settings.observation.mask_file {
            must_exist(mask)?;
        }
        Ok(())
    }
}

/// Loaded data for a run: graph, its Fourier basis, the signal and the split.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub graph: Graph,
    pub basis: GftBasis,
    pub signal: TimeVaryingSignal,
    pub t_split: usize,
    /// Kernel bandwidth actually used for a kNN graph.
    pub knn_bandwidth: Option<f64>,
}

impl Experiment {
    pub fn new(graph: Graph, signal: TimeVaryingSignal, t_split: usize) -> Result<Self> {
        if graph.n_nodes() != signal.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: graph.n_nodes(),
                found: signal.n_nodes(),
            });
        }
        signal.split(t_split)?;
        let basis = graph.gft()?;
        Ok(Self {
            graph,
            basis,
            signal,
            t_split,
            knn_bandwidth: None,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let signal = load_signal_csv(&cfg.signal.path, cfg.signal.layout)?.with_time(0, cfg.signal.step_label.clone());
        let (graph, knn_bandwidth) = match &cfg.graph {
            GraphSource::EdgeList { path } => (load_edge_list(path, signal.n_nodes())?, None),
            GraphSource::Knn { coords, k, bandwidth } => {
                let (labels, pts) = load_coordinates(coords)?;
                let bw = match bandwidth {
                    Some(b) => *b,
                    None => median_knn_distance(&pts, *k)?,
                };
                if !(bw > 0.0) {
                    return Err(Error::Config(
                        "median kNN distance is zero; set an explicit bandwidth".into(),
                    ));
                }
                (knn_graph(&pts, *k, bw)?.with_labels(labels)?, Some(bw))
            }
        };
        let mut exp = Self::new(graph, signal, cfg.t_split)?;
        exp.knn_bandwidth = knn_bandwidth;
        Ok(exp)
    }

    pub fn train(&self) -> TimeVaryingSignal {
        self.signal
            .split(self.t_split)
            .expect("split validated at construction")
            .0
    }

    pub fn test(&self) -> TimeVaryingSignal {
        self.signal
            .split(self.t_split)
            .expect("split validated at construction")
            .1
    }

    pub fn n_test_steps(&self) -> usize {
        self.signal.n_steps() - self.t_split
    }

    /// The run's mask with noise level set; noise stream seeded for `repeat`.
    pub fn observation_model(&self, obs: &ObservationConfig, repeat: usize) -> Result<ObservationModel> {
        let n = self.graph.n_nodes();
        let base = match &obs.mask_file {
            Some(path) => {
                let mask = MaskFile::load(path)?;
                if mask.n != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: mask.n,
                    });
                }
                ObservationModel::from_mask_file(&mask)?
            }
            None => ObservationModel::sample(n, obs.ratio, obs.seed)?,
        };
        Ok(base
            .with_noise(obs.noise_variance)?
            .with_seed(obs.seed.wrapping_add(repeat as u64)))
    }
}

/// Initial estimate before the first test step: observed nodes take their
/// last training value, missing nodes the mean of the observed nodes at that
/// same time step.
pub fn init_estimate(train: &TimeVaryingSignal, model: &ObservationModel) -> Result<DVector<f64>> {
    if train.n_nodes() != model.n_nodes() {
        return Err(Error::DimensionMismatch {
            expected: model.n_nodes(),
            found: train.n_nodes(),
        });
    }
    let last = train.column(train.n_steps() - 1);
    let observed = model.observed_indices();
    let mean = observed.iter().map(|&i| last[i]).sum::<f64>() / observed.len() as f64;
    Ok(DVector::from_iterator(
        last.len(),
        last.iter()
            .enumerate()
            .map(|(i, &v)| if model.is_observed(i) { v } else { mean }),
    ))
}

/// An estimation method run by the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Spectral denoising followed by per-node prediction.
    Reconstruction,
    Baseline(Baseline),
}

impl Method {
    pub fn label(self, backend: Option<&dyn CompletionBackend>) -> String {
        match self {
            Method::Reconstruction => format!("llm-{}", backend.map_or("none", |b| b.name())),
            Method::Baseline(b) => b.label().to_string(),
        }
    }
}

/// Resumable loop state; serialised as the checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineState {
    pub repeat: usize,
    /// Index (within the test split) of the next step to process.
    pub next_step: usize,
    /// `x̂[t-1]`.
    pub estimate: Vec<f64>,
    /// Older estimates, oldest first, at most `history_depth - 1` of them.
    pub history: Vec<Vec<f64>>,
    pub trace: RepeatTrace,
}

impl OnlineState {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

/// What one step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Absolute time index of the observation.
    pub t: u64,
    pub processed: DVector<f64>,
    pub estimate: DVector<f64>,
    pub predictions: Vec<PredictionResult>,
}

/// Runs one repeat of one method, step by step.
pub struct RepeatRunner<'a> {
    exp: &'a Experiment,
    settings: &'a RunSettings,
    method: Method,
    repeat: usize,
    model: ObservationModel,
    test: TimeVaryingSignal,
    filter: SpectralFilter,
    training: Option<TrainOutcome>,
    adaptive: Option<AdaptiveFilterState>,
    initial: DVector<f64>,
    missing: Vec<usize>,
}

impl<'a> RepeatRunner<'a> {
    /// Trains whatever the method needs (the spectral filter for the
    /// reconstruction method, the band for GLMS/GNLMS).
    pub fn prepare(exp: &'a Experiment, settings: &'a RunSettings, method: Method, repeat: usize) -> Result<Self> {
        Self::prepare_with_filter(exp, settings, method, repeat, None)
    }

    /// Like [`RepeatRunner::prepare`], but uses `filter` instead of training one.
    pub fn prepare_with_filter(
        exp: &'a Experiment,
        settings: &'a RunSettings,
        method: Method,
        repeat: usize,
        filter: Option<SpectralFilter>,
    ) -> Result<Self> {
        settings.validate()?;
        let model = exp.observation_model(&settings.observation, repeat)?;
        let train = exp.train();
        let initial = init_estimate(&train, &model)?;
        let mut training = None;
        let filter = match (method, filter) {
            (Method::Reconstruction, Some(f)) => f,
            (Method::Reconstruction, None) => {
                let outcome = train_filter(&exp.basis, &train, &model, &settings.train)?;
                let f = outcome.filter.clone();
                training = Some(outcome);
                f
            }
            (Method::Baseline(_), _) => SpectralFilter::identity(&exp.basis),
        };
        let adaptive = match method {
            Method::Baseline(b @ (Baseline::Glms | Baseline::Gnlms)) => {
                let band = match settings.baseline.bandwidth {
                    Some(f) => f,
                    None => bandwidth_for_energy(&exp.basis, &train, settings.baseline.energy_fraction)?,
                };
                let mu = settings.baseline.step_size;
                Some(if b == Baseline::Glms {
                    AdaptiveFilterState::new(&exp.basis, band, mu, initial.clone())?
                } else {
                    AdaptiveFilterState::normalized(&exp.basis, band, mu, initial.clone(), model.observed())?
                })
            }
            _ => None,
        };
        let missing = model.missing_indices();
        Ok(Self {
            exp,
            settings,
            method,
            repeat,
            model,
            test: exp.test(),
            filter,
            training,
            adaptive,
            initial,
            missing,
        })
    }

    pub fn model(&self) -> &ObservationModel {
        &self.model
    }

    pub fn filter(&self) -> &SpectralFilter {
        &self.filter
    }

    pub fn training(&self) -> Option<&TrainOutcome> {
        self.training.as_ref()
    }

    pub fn n_steps(&self) -> usize {
        let n = self.test.n_steps();
        self.settings.max_steps.map_or(n, |m| m.min(n))
    }

    pub fn initial_state(&self) -> OnlineState {
        OnlineState {
            repeat: self.repeat,
            next_step: 0,
            estimate: self.initial.iter().copied().collect(),
            history: Vec::new(),
            trace: RepeatTrace::default(),
        }
    }

    fn baseline_band(&self) -> Option<usize> {
        self.adaptive.as_ref().map(AdaptiveFilterState::bandwidth)
    }

    /// Advances `state` by one test step.
    pub fn step(&mut self, state: &mut OnlineState, backend: Option<&dyn CompletionBackend>) -> Result<StepRecord> {
        let n = self.exp.graph.n_nodes();
        if state.estimate.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: state.estimate.len(),
            });
        }
        let k = state.next_step;
        if k >= self.test.n_steps() {
            return Err(Error::InvalidArgument(format!("no test step {k}")));
        }
        let t = (self.exp.t_split + k) as u64;
        let truth = self.test.column(k);
        let previous = DVector::from_column_slice(&state.estimate);
        let obs = self.model.observe(&truth, t)?;

        let mut predictions = Vec::new();
        let (processed, estimate) = match self.method {
            Method::Reconstruction => {
                let backend =
                    backend.ok_or_else(|| Error::Config("reconstruction needs a predictor backend".into()))?;
                let processed = self.filter.denoise(&self.exp.basis, &obs, &previous)?;
                let mut estimate = match self.settings.observed_source {
                    ObservedSource::Denoised => processed.clone(),
                    ObservedSource::Raw => obs.filled(&processed)?,
                };
                let mut tasks: Vec<NodeTask> = Vec::with_capacity(self.missing.len());
                for &node in &self.missing {
                    let mut task = build_task(
                        node,
                        k as u64,
                        previous[node],
                        &processed,
                        &self.exp.graph,
                        &self.model,
                        self.settings.precision,
                    )?;
                    if task.is_isolated() {
                        // no spatial context: keep the temporal estimate
                        estimate[node] = previous[node];
                        state.trace.isolated_fallbacks += 1;
                        continue;
                    }
                    task.earlier = state.history.iter().map(|h| h[node]).collect();
                    tasks.push(task);
                }
                if !tasks.is_empty() {
                    predictions = predict_batch(&tasks, &self.settings.predictor, backend)?;
                    for p in &predictions {
                        estimate[p.node] = p.value;
                        if p.flagged {
                            state.trace.flagged_tasks += 1;
                        }
                    }
                    state.trace.estimated_tokens +=
                        estimate_tokens(&predictions, self.settings.predictor.tasks_per_prompt);
                }
                (processed, estimate)
            }
            Method::Baseline(b) => {
                let estimate = match b {
                    Baseline::LastValue => last_value_step(&previous, &obs)?,
                    Baseline::NeighborMean => neighbor_mean_step(&previous, &obs, &self.exp.graph)?,
                    Baseline::Glms | Baseline::Gnlms => {
                        let mut st = self.adaptive.take().expect("adaptive state prepared");
                        st.set_estimate(previous.clone())?;
                        let res = if b == Baseline::Glms {
                            st.glms_step(&obs).cloned()
                        } else {
                            st.gnlms_step(&obs).cloned()
                        };
                        self.adaptive = Some(st);
                        res?
                    }
                };
                (obs.filled(&previous)?, estimate)
            }
        };
        if estimate.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite estimate at step {k}")));
        }

        state.trace.record(&truth, &estimate, &self.missing)?;
        if self.settings.history_depth > 1 {
            state.history.push(state.estimate.clone());
            let keep = self.settings.history_depth - 1;
            if state.history.len() > keep {
                state.history.drain(..state.history.len() - keep);
            }
        }
        state.estimate = estimate.iter().copied().collect();
        state.next_step += 1;
        Ok(StepRecord {
            step: k,
            t,
            processed,
            estimate,
            predictions,
        })
    }

    /// Metadata describing the choices this runner made.
    pub fn metadata(&self) -> serde_json::Value {
        let g = &self.exp.graph;
        let mut meta = json!({
            "graph": GraphSummary::new(g, &self.exp.basis),
            "graph_weights": if g.is_weighted() { "weighted" } else { "binary" },
            "knn_bandwidth_km": self.exp.knn_bandwidth,
            "n_observed": self.model.n_observed(),
            "n_missing": self.missing.len(),
            "observation_ratio": self.model.ratio(),
            "t_split": self.exp.t_split,
            "test_steps": self.n_steps(),
            "initial_estimate": "observed: last training value; missing: mean of observed at that step",
            "history_depth": self.settings.history_depth,
        });
        if let Method::Reconstruction = self.method {
            meta["training_fill"] = json!("training-set node mean");
            meta["test_fill"] = json!("previous estimate");
            meta["observed_source"] = json!(self.settings.observed_source);
            meta["isolated_node_policy"] = json!("previous estimate");
            meta["retry_fallback"] = json!("previous estimate");
            if let Some(tr) = &self.training {
                meta["training_steps"] = json!(tr.trace.len());
                meta["training_stop"] = json!(tr.stop);
                meta["training_final_mae"] = json!(tr.final_window_mae(self.settings.train.window));
            }
        }
        if let Some(f) = self.baseline_band() {
            meta["baseline_bandwidth"] = json!(f);
            meta["baseline_step_size"] = json!(self.settings.baseline.step_size);
        }
        meta
    }
}

fn estimate_tokens(predictions: &[PredictionResult], per_prompt: usize) -> usize {
    // one prompt per `per_prompt` results; each carries its prompt text
    predictions
        .chunks(per_prompt.max(1))
        .map(|chunk| {
            let r = &chunk[0];
            let chars =
                crate::prompt::SYSTEM_PROMPT.len() + r.prompt.len() + r.completion.as_ref().map_or(0, String::len);
            chars.div_ceil(4) * r.attempts as usize
        })
        .sum()
}

/// Files of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints"))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn mask(&self) -> PathBuf {
        self.root.join("mask.json")
    }

    pub fn filter(&self, repeat: usize) -> PathBuf {
        self.root.join(format!("filter_r{repeat}.json"))
    }

    pub fn checkpoint(&self, method: &str, repeat: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("{method}_r{repeat}.json"))
    }

    pub fn partial(&self, method: &str) -> PathBuf {
        self.root.join(format!("partial_{method}.json"))
    }

    pub fn transcript(&self) -> PathBuf {
        self.root.join("transcript.jsonl")
    }

    pub fn report(&self, format: ReportFormat) -> PathBuf {
        self.root.join(format!("report.{}", format.extension()))
    }
}

/// Options controlling a call to [`run_method`].
#[derive(Default)]
pub struct RunOptions<'a> {
    pub run_dir: Option<&'a RunDir>,
    pub config_snapshot: Option<serde_json::Value>,
    /// Pre-trained filter to use instead of training.
    pub filter: Option<SpectralFilter>,
    /// Resume states per repeat.
    pub resume: Vec<OnlineState>,
    /// Pick up each repeat from its checkpoint in `run_dir`, when present.
    pub resume_from_checkpoints: bool,
}

/// Runs one method over all repeats and assembles its report.
pub fn run_method(
    exp: &Experiment,
    settings: &RunSettings,
    method: Method,
    backend: Option<&dyn CompletionBackend>,
    opts: &RunOptions<'_>,
) -> Result<RunReport> {
    let label = method.label(backend);
    let mut transcript = match (opts.run_dir, settings.transcript, method) {
        (Some(dir), true, Method::Reconstruction) => {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(opts.resume_from_checkpoints)
                .truncate(!opts.resume_from_checkpoints)
                .open(dir.transcript())?;
            Some(BufWriter::new(file))
        }
        _ => None,
    };
    let mut traces = Vec::with_capacity(settings.repeats);
    let mut metadata = serde_json::Value::Null;
    for repeat in 0..settings.repeats {
        let mut runner = RepeatRunner::prepare_with_filter(exp, settings, method, repeat, opts.filter.clone())?;
        if repeat == 0 {
            metadata = runner.metadata();
        }
        if let (Some(dir), Method::Reconstruction) = (opts.run_dir, method) {
            if let Some(tr) = runner.training() {
                FilterFile::new(tr, &settings.train).save(&dir.filter(repeat))?;
            }
        }
        let checkpoint = match opts.run_dir {
            Some(dir) if opts.resume_from_checkpoints && dir.checkpoint(&label, repeat).exists() => {
                Some(OnlineState::load(&dir.checkpoint(&label, repeat))?)
            }
            _ => None,
        };
        let mut state = match (opts.resume.iter().find(|s| s.repeat == repeat), checkpoint) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => {
                log::info!("{label} repeat {repeat}: resuming at step {}", s.next_step);
                s
            }
            (None, None) => runner.initial_state(),
        };
        let total = runner.n_steps();
        while state.next_step < total {
            let record = match runner.step(&mut state, backend) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(dir) = opts.run_dir {
                        state.save(&dir.partial(&label))?;
                    }
                    return Err(e);
                }
            };
            if let Some(w) = transcript.as_mut() {
                for p in &record.predictions {
                    let entry = TranscriptEntry {
                        t: p.t,
                        node: p.node,
                        prompt: p.prompt.clone(),
                        completion: p.completion.clone(),
                        parsed: (!p.flagged).then_some(p.value),
                        attempts: p.attempts,
                    };
                    serde_json::to_writer(&mut *w, &entry)?;
                    w.write_all(b"\n")?;
                }
            }
            if let Some(dir) = opts.run_dir {
                if state.next_step % settings.checkpoint_every == 0 {
                    state.save(&dir.checkpoint(&label, repeat))?;
                }
            }
        }
        if let Some(dir) = opts.run_dir {
            state.save(&dir.checkpoint(&label, repeat))?;
        }
        traces.push(state.trace);
    }
    if let Some(mut w) = transcript {
        w.flush()?;
    }
    let mut report = RunReport::from_repeats(label, settings.observation.noise_variance, &traces)?;
    report.metadata = metadata;
    report.config_snapshot = opts
        .config_snapshot
        .clone()
        .unwrap_or_else(|| serde_json::to_value(settings).unwrap_or_default());
    if transcript_enabled(opts, settings, method) {
        report.transcript_path = opts.run_dir.map(|d| d.transcript().display().to_string());
    }
    Ok(report)
}

fn transcript_enabled(opts: &RunOptions<'_>, settings: &RunSettings, method: Method) -> bool {
    opts.run_dir.is_some() && settings.transcript && method == Method::Reconstruction
}

/// The full online reconstruction with the given backend.
pub fn run_online(exp: &Experiment, settings: &RunSettings, backend: &dyn CompletionBackend) -> Result<RunReport> {
    run_method(
        exp,
        settings,
        Method::Reconstruction,
        Some(backend),
        &RunOptions::default(),
    )
}

/// Runs the reconstruction (when `backend` is given) plus every configured
/// baseline, writing the run directory when `output_dir` is set. `filter`
/// replaces training with a pre-trained filter.
pub fn run_from_config(
    cfg: &RunConfig,
    backend: Option<&dyn CompletionBackend>,
    filter: Option<SpectralFilter>,
    resume: bool,
) -> Result<Vec<RunReport>> {
    let exp = Experiment::load(cfg)?;
    let snapshot = serde_json::to_value(cfg)?;
    let dir = cfg.output_dir.as_deref().map(RunDir::create).transpose()?;
    if let Some(dir) = &dir {
        std::fs::write(dir.config(), serde_json::to_string_pretty(cfg)?)?;
        exp.observation_model(&cfg.settings.observation, 0)?
            .to_mask_file()
            .save(&dir.mask())?;
    }
    let mut methods: Vec<Method> = Vec::new();
    if backend.is_some() {
        methods.push(Method::Reconstruction);
    }
    methods.extend(cfg.settings.baselines.iter().map(|&b| Method::Baseline(b)));
    let opts = RunOptions {
        run_dir: dir.as_ref(),
        config_snapshot: Some(snapshot),
        filter,
        resume: Vec::new(),
        resume_from_checkpoints: resume,
    };
    let mut reports = Vec::new();
    for m in methods {
        let b = if m == Method::Reconstruction { backend } else { None };
        log::info!("running {}", m.label(b));
        reports.push(run_method(&exp, &cfg.settings, m, b, &opts)?);
    }
    if let Some(dir) = &dir {
        for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
            emit_report(&reports, f, &dir.report(f))?;
        }
    }
    Ok(reports)
}

/// Builds the prompts the reconstruction would send for the first `steps`
/// test steps without calling any backend. Missing nodes carry their
/// previous estimate forward.
pub fn render_prompts(
    exp: &Experiment,
    settings: &RunSettings,
    filter: Option<SpectralFilter>,
    steps: usize,
) -> Result<String> {
    let runner = RepeatRunner::prepare_with_filter(exp, settings, Method::Reconstruction, 0, filter)?;
    let mut state = runner.initial_state();
    let mut history: VecDeque<DVector<f64>> = VecDeque::new();
    let mut out = format!("{}\n", crate::prompt::render_system_prompt());
    for k in 0..steps.min(runner.n_steps()) {
        let previous = DVector::from_column_slice(&state.estimate);
        let t = (exp.t_split + k) as u64;
        let obs = runner.model.observe(&runner.test.column(k), t)?;
        let processed = runner.filter.denoise(&exp.basis, &obs, &previous)?;
        let mut estimate = processed.clone();
        let mut tasks = Vec::new();
        for &node in &runner.missing {
            let mut task = build_task(
                node,
                k as u64,
                previous[node],
                &processed,
                &exp.graph,
                &runner.model,
                settings.precision,
            )?;
            task.earlier = history.iter().map(|h| h[node]).collect();
            estimate[node] = previous[node];
            tasks.push(task);
        }
        for chunk in tasks.chunks(settings.predictor.tasks_per_prompt) {
            out.push('\n');
            out.push_str(&crate::prompt::render_user_prompt(chunk)?);
            out.push('\n');
        }
        if settings.history_depth > 1 {
            history.push_back(previous);
            while history.len() > settings.history_depth - 1 {
                history.pop_front();
            }
        }
        state.estimate = estimate.iter().copied().collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::MockBackend;
    use crate::synthetic::{bandlimited_signal, random_geometric_graph, BandlimitedSpec};
    use nalgebra::DMatrix;

    fn p3_experiment() -> Experiment {
        let g = Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let s = TimeVaryingSignal::new(DMatrix::from_row_slice(
            3,
            4,
            &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.],
        ))
        .unwrap();
        Experiment::new(g, s, 2).unwrap()
    }

    #[test]
    fn init_estimate_policies() {
        let exp = p3_experiment();
        let train = exp.train();
        let all = ObservationModel::new(vec![true; 3], 0.0, 0).unwrap();
        assert_eq!(init_estimate(&train, &all).unwrap().as_slice(), &[2.0, 6.0, 10.0]);
        let one_missing = ObservationModel::new(vec![true, false, true], 0.0, 0).unwrap();
        assert_eq!(
            init_estimate(&train, &one_missing).unwrap().as_slice(),
            &[2.0, 6.0, 10.0]
        );
        let constant = TimeVaryingSignal::new(DMatrix::from_element(3, 2, 4.5)).unwrap();
        assert_eq!(init_estimate(&constant, &one_missing).unwrap().as_slice(), &[4.5; 3]);
        let skew = TimeVaryingSignal::new(DMatrix::from_row_slice(3, 1, &[1.0, 100.0, 3.0])).unwrap();
        assert_eq!(init_estimate(&skew, &one_missing).unwrap()[1], 2.0);
    }

    fn smooth_experiment(n: usize, t: usize) -> Experiment {
        let g = random_geometric_graph(n, 0.35, 3).unwrap();
        let basis = g.gft().unwrap();
        let s = bandlimited_signal(
            &basis,
            &BandlimitedSpec {
                bandwidth: 4,
                n_steps: t,
                offset: 20.0,
                amplitude: 2.0,
                min_period: 50.0,
                seed: 9,
            },
        )
        .unwrap();
        Experiment::new(g, s, t / 2).unwrap()
    }

    #[test]
    fn lossless_configuration_is_exact() {
        let exp = smooth_experiment(12, 40);
        let settings = RunSettings {
            observation: ObservationConfig {
                ratio: 1.0,
                noise_variance: 0.0,
                ..Default::default()
            },
            train: TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let report = run_online(&exp, &settings, &MockBackend).unwrap();
        assert!(report.per_t_mae.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn observed_nodes_pass_through_denoised_values() {
        let exp = smooth_experiment(15, 30);
        let settings = RunSettings {
            observation: ObservationConfig {
                noise_variance: 0.5,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut runner = RepeatRunner::prepare(&exp, &settings, Method::Reconstruction, 0).unwrap();
        let mut state = runner.initial_state();
        for _ in 0..5 {
            let rec = runner.step(&mut state, Some(&MockBackend)).unwrap();
            for i in runner.model().observed_indices() {
                assert_eq!(rec.estimate[i], rec.processed[i]);
            }
        }
    }

    #[test]
    fn history_depth_feeds_earlier_estimates() {
        let exp = smooth_experiment(10, 20);
        let settings = RunSettings {
            history_depth: 3,
            ..Default::default()
        };
        let mut runner = RepeatRunner::prepare(&exp, &settings, Method::Reconstruction, 0).unwrap();
        let mut state = runner.initial_state();
        for _ in 0..4 {
            runner.step(&mut state, Some(&MockBackend)).unwrap();
        }
        assert_eq!(state.history.len(), 2);
    }

    #[test]
    fn render_prompts_on_path_graph() {
        let exp = p3_experiment();
        let dir = tempfile::tempdir().unwrap();
        let mask = dir.path().join("mask.json");
        MaskFile {
            n: 3,
            observed_indices: vec![0, 2],
            ratio: 2.0 / 3.0,
            seed: 0,
        }
        .save(&mask)
        .unwrap();
        let settings = RunSettings {
            observation: ObservationConfig {
                noise_variance: 0.0,
                mask_file: Some(mask),
                ..Default::default()
            },
            ..Default::default()
        };
        let text = render_prompts(&exp, &settings, Some(SpectralFilter::identity(&exp.basis)), 2).unwrap();
        assert!(text.contains("Time 0, Entity index: 1. Previous: 6.0, Neighbors: [3.0, 11.0]."));
        assert!(text.contains("Time 1, Entity index: 1. Previous: 6.0, Neighbors: [4.0, 12.0]."));
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg = RunConfig::from_json(
            r#"{
                "graph": {"kind": "edge-list", "path": "edges.csv"},
                "signal": {"path": "signal.csv"},
                "t_split": 2,
                "observation": {"ratio": 0.7, "seed": 3, "noise_variance": 1.0},
                "predictor": {"backend": "mock"},
                "baselines": ["glms", "last-value"]
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.settings.repeats, 1);
        assert_eq!(cfg.settings.baselines, vec![Baseline::Glms, Baseline::LastValue]);
        assert_eq!(cfg.settings.train, TrainConfig::default());
        let bad = RunConfig::from_json(
            r#"{"graph": {"kind": "edge-list", "path": "e"}, "signal": {"path": "s"}, "t_split": 2, "bogus": 1}"#,
        );
        assert!(bad.is_err());
    }
}
