use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use graphrecon_core::graph::write_edge_list;
use graphrecon_core::metrics::{emit_report, load_reports, render_report};
use graphrecon_core::online::{render_prompts, run_from_config, Experiment, RunDir};
use graphrecon_core::signal::write_signal_csv;
use graphrecon_core::spectral::train_filter;
use graphrecon_core::synthetic::{bandlimited_signal, random_geometric_graph, BandlimitedSpec};
use graphrecon_core::{Error, FilterFile, ReportFormat, RunConfig, SpectralFilter};

#[derive(Parser)]
#[command(name = "graphrecon", version, about = "Online graph signal reconstruction")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the spectral filter on the training split and export it.
    TrainFilter {
        #[command(flatten)]
        run: RunArgs,
        /// Output file (default: <output_dir>/filter.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full online reconstruction plus the configured baselines.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Use an exported filter instead of training one.
        #[arg(long)]
        filter: Option<PathBuf>,
        /// Continue from checkpoints in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
    },
    /// Run only the baselines.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
    },
    /// Print the prompts the reconstruction would send, without a backend.
    RenderPrompts {
        #[command(flatten)]
        run: RunArgs,
        /// Number of test steps to render.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, conflicts_with = "identity_filter")]
        filter: Option<PathBuf>,
        /// Skip training and use all-ones gains.
        #[arg(long)]
        identity_filter: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-aggregate reports from earlier runs.
    Report {
        /// Run directories or report JSON files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic bandlimited dataset and a matching config.
    Generate {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 30)]
        nodes: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Number of low graph frequencies carrying energy.
        #[arg(long, default_value_t = 5)]
        bandwidth: usize,
        /// Connection radius of the random geometric graph (unit square).
        #[arg(long, default_value_t = 0.35)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training split; defaults to half the steps.
        #[arg(long)]
        t_split: Option<usize>,
    },
}

/// Config file plus per-field overrides.
#[derive(Args, Default)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Edge list `src,dst[,weight]`.
    #[arg(long, conflicts_with = "coords")]
    edges: Option<PathBuf>,
    /// Coordinates `id,lat,lon` for a kNN graph.
    #[arg(long)]
    coords: Option<PathBuf>,
    #[arg(long)]
    knn_k: Option<usize>,
    /// Kernel bandwidth in km.
    #[arg(long)]
    knn_bandwidth: Option<f64>,
    #[arg(long)]
    signal: Option<PathBuf>,
    /// nodes-as-rows or nodes-as-columns.
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    t_split: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_variance: Option<f64>,
    #[arg(long)]
    mask_file: Option<PathBuf>,
    /// mock or remote.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    timeout_secs: Option<f64>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    tasks_per_prompt: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Comma-separated: last-value,neighbor-mean,glms,gnlms.
    #[arg(long, value_delimiter = ',')]
    baselines: Option<Vec<String>>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    precision: Option<usize>,
    #[arg(long)]
    history_depth: Option<usize>,
    /// denoised or raw.
    #[arg(long)]
    observed_source: Option<String>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    transcript: bool,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

fn set(root: &mut Value, path: &[&str], v: Value) {
    let mut cur = root;
    for key in &path[..path.len() - 1] {
        if !cur.get(*key).is_some_and(Value::is_object) {
            cur[*key] = json!({});
        }
        cur = &mut cur[*key];
    }
    cur[path[path.len() - 1]] = v;
}

impl RunArgs {
    fn to_config(&self) -> anyhow::Result<RunConfig> {
        let mut v = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let v: Value =
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                rebase_paths(v, p.parent().unwrap_or(Path::new(".")))
            }
            None => json!({}),
        };
        if !v.is_object() {
            bail!(Error::Config("config must be a JSON object".into()));
        }
        if let Some(p) = &self.edges {
            v["graph"] = json!({"kind": "edge-list", "path": p});
        }
        if let Some(p) = &self.coords {
            v["graph"] = json!({"kind": "knn", "coords": p, "k": self.knn_k.unwrap_or(8)});
        }
        let mut opt = |path: &[&str], value: Option<Value>| {
            if let Some(x) = value {
                set(&mut v, path, x);
            }
        };
        opt(&["graph", "k"], self.knn_k.map(Value::from));
        opt(&["graph", "bandwidth"], self.knn_bandwidth.map(Value::from));
        opt(&["signal", "path"], self.signal.as_ref().map(|p| json!(p)));
        opt(&["signal", "layout"], self.layout.clone().map(Value::from));
        opt(&["t_split"], self.t_split.map(Value::from));
        opt(&["observation", "ratio"], self.ratio.map(Value::from));
        opt(&["observation", "seed"], self.seed.map(Value::from));
        opt(&["observation", "noise_variance"], self.noise_variance.map(Value::from));
        opt(&["observation", "mask_file"], self.mask_file.as_ref().map(|p| json!(p)));
        opt(&["predictor", "backend"], self.backend.clone().map(Value::from));
        opt(&["predictor", "endpoint_url"], self.endpoint.clone().map(Value::from));
        opt(&["predictor", "model_name"], self.model.clone().map(Value::from));
        opt(&["predictor", "max_retries"], self.max_retries.map(Value::from));
        opt(
            &["predictor", "request_timeout_secs"],
            self.timeout_secs.map(Value::from),
        );
        opt(&["predictor", "max_concurrency"], self.concurrency.map(Value::from));
        opt(
            &["predictor", "tasks_per_prompt"],
            self.tasks_per_prompt.map(Value::from),
        );
        opt(&["train", "learning_rate"], self.learning_rate.map(Value::from));
        opt(&["train", "max_iters"], self.max_iters.map(Value::from));
        opt(&["train", "patience"], self.patience.map(Value::from));
        opt(&["baselines"], self.baselines.clone().map(Value::from));
        opt(&["baseline", "step_size"], self.step_size.map(Value::from));
        opt(&["repeats"], self.repeats.map(Value::from));
        opt(&["precision"], self.precision.map(Value::from));
        opt(&["history_depth"], self.history_depth.map(Value::from));
        opt(&["observed_source"], self.observed_source.clone().map(Value::from));
        opt(&["max_steps"], self.max_steps.map(Value::from));
        opt(&["transcript"], self.transcript.then_some(Value::Bool(true)));
        opt(&["output_dir"], self.output_dir.as_ref().map(|p| json!(p)));
        let cfg = RunConfig::from_json(&v.to_string()).map_err(|e| match e {
            Error::Json(j) => Error::Config(j.to_string()),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Resolves relative file paths in a config file against its directory.
fn rebase_paths(mut v: Value, base: &Path) -> Value {
    for ptr in [
        "/graph/path",
        "/graph/coords",
        "/signal/path",
        "/observation/mask_file",
        "/output_dir",
    ] {
        if let Some(slot) = v.pointer_mut(ptr) {
            if let Some(s) = slot.as_str().filter(|s| Path::new(s).is_relative()) {
                *slot = json!(base.join(s));
            }
        }
    }
    v
}

fn load_filter(path: &Path, exp: &Experiment) -> anyhow::Result<SpectralFilter> {
    Ok(FilterFile::load(path)?.into_filter(&exp.basis)?)
}

fn write_or_print(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainFilter { run, out } => {
            let cfg = run.to_config()?;
            let exp = Experiment::load(&cfg)?;
            let model = exp.observation_model(&cfg.settings.observation, 0)?;
            let outcome = train_filter(&exp.basis, &exp.train(), &model, &cfg.settings.train)?;
            let path = match (out, &cfg.output_dir) {
                (Some(p), _) => p,
                (None, Some(dir)) => {
                    std::fs::create_dir_all(dir)?;
                    dir.join("filter.json")
                }
                (None, None) => bail!(Error::Config("give --out or an output directory".into())),
            };
            FilterFile::new(&outcome, &cfg.settings.train).save(&path)?;
            eprintln!(
                "trained {} steps ({:?}), final MAE {:.4}; wrote {}",
                outcome.trace.len(),
                outcome.stop,
                outcome.final_window_mae(cfg.settings.train.window),
                path.display()
            );
        }
        Command::Run {
            run,
            filter,
            resume,
            format,
        } => {
            let cfg = run.to_config()?;
            // fail on missing credentials before touching any data
            let backend = cfg.settings.predictor.backend()?;
            let filter = match &filter {
                Some(p) => Some(load_filter(p, &Experiment::load(&cfg)?)?),
                None => None,
            };
            let reports = run_from_config(&cfg, Some(backend.as_ref()), filter, resume)?;
            print!("{}", render_report(&reports, format)?);
        }
        Command::Baseline { run, format } => {
            let cfg = run.to_config()?;
            if cfg.settings.baselines.is_empty() {
                bail!(Error::Config("no baselines selected".into()));
            }
            let reports = run_from_config(&cfg, None, None, false)?;
            print!("{}", render_report(&reports, format)?);
        }
        Command::RenderPrompts {
            run,
            steps,
            filter,
            identity_filter,
            out,
        } => {
            let cfg = run.to_config()?;
            let exp = Experiment::load(&cfg)?;
            let filter = match (&filter, identity_filter) {
                (Some(p), _) => Some(load_filter(p, &exp)?),
                (None, true) => Some(SpectralFilter::identity(&exp.basis)),
                (None, false) => None,
            };
            let text = render_prompts(&exp, &cfg.settings, filter, steps)?;
            write_or_print(&text, out.as_deref())?;
        }
        Command::Report { inputs, format, out } => {
            let mut reports = Vec::new();
            for input in &inputs {
                let path = if input.is_dir() {
                    RunDir::create(input)?.report(ReportFormat::Json)
                } else {
                    input.clone()
                };
                reports.extend(load_reports(&path).with_context(|| format!("reading {}", path.display()))?);
            }
            match out {
                Some(p) => emit_report(&reports, format, &p)?,
                None => print!("{}", render_report(&reports, format)?),
            }
        }
        Command::Generate {
            out_dir,
            nodes,
            steps,
            bandwidth,
            radius,
            seed,
            t_split,
        } => {
            std::fs::create_dir_all(&out_dir)?;
            let graph = random_geometric_graph(nodes, radius, seed)?;
            let basis = graph.gft()?;
            let signal = bandlimited_signal(
                &basis,
                &BandlimitedSpec {
                    bandwidth,
                    n_steps: steps,
                    seed,
                    ..Default::default()
                },
            )?;
            write_edge_list(&out_dir.join("edges.csv"), &graph)?;
            write_signal_csv(&out_dir.join("signal.csv"), &signal)?;
            let cfg = json!({
                "graph": {"kind": "edge-list", "path": "edges.csv"},
                "signal": {"path": "signal.csv"},
                "t_split": t_split.unwrap_or(steps / 2),
                "observation": {"ratio": 0.7, "seed": seed, "noise_variance": 0.2},
                "baselines": ["last-value", "neighbor-mean", "glms", "gnlms"],
                "output_dir": "run",
            });
            std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            eprintln!("wrote {}", out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<Error>(),
                Some(Error::Config(_) | Error::InvalidArgument(_))
            );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
