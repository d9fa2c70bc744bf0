//! Error metrics, aggregation over repeats, and report files.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crate::spectral::mae;

/// Root mean squared error `sqrt((1/N) Σ (a_n - b_n)²)`.
pub fn rmse(truth: &DVector<f64>, estimate: &DVector<f64>) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: estimate.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("empty vectors".into()));
    }
    let sq: f64 = truth.iter().zip(estimate.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sq / truth.len() as f64).sqrt())
}

/// Mean with unbiased sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Single value → std 0. Empty input → zeros.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {}", self.mean, sci(self.std))
    }
}

/// `1.6e-01` style: one decimal, signed two-digit exponent.
fn sci(v: f64) -> String {
    let s = format!("{v:.1e}");
    match s.split_once('e') {
        Some((mant, exp)) => {
            let e: i32 = exp.parse().unwrap_or(0);
            let sign = if e < 0 { '-' } else { '+' };
            format!("{mant}e{sign}{:02}", e.abs())
        }
        None => s,
    }
}

/// Per-step errors of one repeat.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepeatTrace {
    pub mae: Vec<f64>,
    pub rmse: Vec<f64>,
    /// Errors restricted to unobserved nodes (0 when every node is observed).
    pub mae_missing: Vec<f64>,
    pub rmse_missing: Vec<f64>,
    pub flagged_tasks: usize,
    pub isolated_fallbacks: usize,
    pub estimated_tokens: usize,
}

impl RepeatTrace {
    pub fn len(&self) -> usize {
        self.mae.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mae.is_empty()
    }

    /// Scores one step's estimate against ground truth.
    pub fn record(&mut self, truth: &DVector<f64>, estimate: &DVector<f64>, missing: &[usize]) -> Result<()> {
        self.mae.push(mae(truth, estimate)?);
        self.rmse.push(rmse(truth, estimate)?);
        if missing.is_empty() {
            self.mae_missing.push(0.0);
            self.rmse_missing.push(0.0);
        } else {
            let t = DVector::from_iterator(missing.len(), missing.iter().map(|&i| truth[i]));
            let e = DVector::from_iterator(missing.len(), missing.iter().map(|&i| estimate[i]));
            self.mae_missing.push(mae(&t, &e)?);
            self.rmse_missing.push(rmse(&t, &e)?);
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean ± sample std over repeats of each repeat's time-averaged metric.
pub fn aggregate(per_repeat: &[f64]) -> MeanStd {
    MeanStd::of(per_repeat)
}

/// Results of one method under one configuration, possibly over several repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub noise_variance: f64,
    pub repeats: usize,
    /// Per-step errors averaged over repeats.
    pub per_t_mae: Vec<f64>,
    pub per_t_rmse: Vec<f64>,
    pub per_t_mae_missing: Vec<f64>,
    pub per_t_rmse_missing: Vec<f64>,
    pub aggregate_mae: MeanStd,
    pub aggregate_rmse: MeanStd,
    pub aggregate_mae_missing: MeanStd,
    pub aggregate_rmse_missing: MeanStd,
    pub flagged_tasks: usize,
    pub isolated_fallbacks: usize,
    pub estimated_tokens: usize,
    pub metadata: serde_json::Value,
    pub config_snapshot: serde_json::Value,
    pub transcript_path: Option<String>,
}

impl RunReport {
    pub fn from_repeats(method: impl Into<String>, noise_variance: f64, traces: &[RepeatTrace]) -> Result<Self> {
        let first = traces
            .first()
            .ok_or_else(|| Error::InvalidArgument("a report needs at least one repeat".into()))?;
        let horizon = first.len();
        if let Some(bad) = traces.iter().find(|t| t.len() != horizon) {
            return Err(Error::DimensionMismatch {
                expected: horizon,
                found: bad.len(),
            });
        }
        let per_t = |f: fn(&RepeatTrace) -> &Vec<f64>| -> Vec<f64> {
            (0..horizon)
                .map(|k| traces.iter().map(|tr| f(tr)[k]).sum::<f64>() / traces.len() as f64)
                .collect()
        };
        let agg = |f: fn(&RepeatTrace) -> &Vec<f64>| -> MeanStd {
            aggregate(&traces.iter().map(|tr| mean(f(tr))).collect::<Vec<_>>())
        };
        let report = Self {
            method: method.into(),
            noise_variance,
            repeats: traces.len(),
            per_t_mae: per_t(|t| &t.mae),
            per_t_rmse: per_t(|t| &t.rmse),
            per_t_mae_missing: per_t(|t| &t.mae_missing),
            per_t_rmse_missing: per_t(|t| &t.rmse_missing),
            aggregate_mae: agg(|t| &t.mae),
            aggregate_rmse: agg(|t| &t.rmse),
            aggregate_mae_missing: agg(|t| &t.mae_missing),
            aggregate_rmse_missing: agg(|t| &t.rmse_missing),
            flagged_tasks: traces.iter().map(|t| t.flagged_tasks).sum(),
            isolated_fallbacks: traces.iter().map(|t| t.isolated_fallbacks).sum(),
            estimated_tokens: traces.iter().map(|t| t.estimated_tokens).sum(),
            metadata: serde_json::Value::Null,
            config_snapshot: serde_json::Value::Null,
            transcript_path: None,
        };
        let finite = [
            report.aggregate_mae,
            report.aggregate_rmse,
            report.aggregate_mae_missing,
            report.aggregate_rmse_missing,
        ]
        .iter()
        .all(|m| m.mean.is_finite() && m.std.is_finite());
        if !finite {
            return Err(Error::Numeric(format!(
                "non-finite aggregate metrics for {}",
                report.method
            )));
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" | "markdown-table" => Ok(Self::Markdown),
            other => Err(Error::InvalidArgument(format!("unknown report format {other:?}"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Json => "json",
            Self::Csv => "csv",
            Self::Markdown => "md",
        }
    }
}

/// Renders reports in the given format.
pub fn render_report(reports: &[RunReport], format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports)?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => render_csv(reports),
        ReportFormat::Markdown => render_markdown(reports),
    })
}

/// Writes reports to `path` in the given format.
pub fn emit_report(reports: &[RunReport], format: ReportFormat, path: &Path) -> Result<()> {
    let body = render_report(reports, format)?;
    std::fs::write(path, body).map_err(|e| Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn render_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("method,noise_variance,t,mae,rmse,mae_missing,rmse_missing\n");
    for r in reports {
        for k in 0..r.per_t_mae.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method,
                r.noise_variance,
                k,
                r.per_t_mae[k],
                r.per_t_rmse[k],
                r.per_t_mae_missing[k],
                r.per_t_rmse_missing[k]
            ));
        }
    }
    out
}

/// Methods as rows, noise variances as columns, one table per metric.
fn render_markdown(reports: &[RunReport]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut variances: Vec<f64> = reports.iter().map(|r| r.noise_variance).collect();
    variances.sort_by(f64::total_cmp);
    variances.dedup();

    let table = |title: &str, pick: fn(&RunReport) -> MeanStd| -> String {
        let mut s = format!("### {title}\n\n| Method |");
        for v in &variances {
            s.push_str(&format!(" σ² = {v} |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(variances.len()));
        s.push('\n');
        for m in &methods {
            s.push_str(&format!("| {m} |"));
            for v in &variances {
                let cell = reports
                    .iter()
                    .find(|r| r.method == *m && r.noise_variance == *v)
                    .map(|r| pick(r).to_string())
                    .unwrap_or_else(|| "n/a".into());
                s.push_str(&format!(" {cell} |"));
            }
            s.push('\n');
        }
        s
    };
    format!(
        "{}\n{}\n{}\n{}",
        table("RMSE (all nodes)", |r| r.aggregate_rmse),
        table("MAE (all nodes)", |r| r.aggregate_mae),
        table("RMSE (missing nodes)", |r| r.aggregate_rmse_missing),
        table("MAE (missing nodes)", |r| r.aggregate_mae_missing),
    )
}

/// Reads reports back from a JSON report file (a single report or a list).
pub fn load_reports(path: &Path) -> Result<Vec<RunReport>> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    Ok(if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    })
}
