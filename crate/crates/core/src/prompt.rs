//! Rendering node prediction tasks as chat prompts and parsing numeric answers.
//!
//! A missing node's context (its previous estimate and the denoised values of
//! its observed neighbours) is written out as plain English for a
//! text-completion model. Completions are parsed back into numbers.

use std::sync::OnceLock;

use nalgebra::DVector;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::signal::ObservationModel;

pub const SYSTEM_PROMPT: &str = "The spatiotemporal task is to predict the current number on a graph based on its previous value and the value of its neighbors.";

/// One missing node's prediction context at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTask {
    pub node: usize,
    pub t: u64,
    /// Estimate of this node at `t - 1`.
    pub previous: f64,
    /// Older estimates, oldest first; empty for one-step history.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub earlier: Vec<f64>,
    /// Denoised values of observed neighbours, ascending by node index.
    pub neighbor_values: Vec<f64>,
    /// Decimal places requested in the answer.
    pub precision: usize,
}

impl NodeTask {
    /// No observed neighbour: the predictor has only temporal context.
    pub fn is_isolated(&self) -> bool {
        self.neighbor_values.is_empty()
    }
}

/// Builds the task for missing node `node` from the processed observation.
pub fn build_task(
    node: usize,
    t: u64,
    previous: f64,
    processed: &DVector<f64>,
    graph: &Graph,
    model: &ObservationModel,
    precision: usize,
) -> Result<NodeTask> {
    let n = graph.n_nodes();
    if processed.len() != n || model.n_nodes() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: if processed.len() != n {
                processed.len()
            } else {
                model.n_nodes()
            },
        });
    }
    if node >= n {
        return Err(Error::NodeOutOfRange { index: node, n });
    }
    if model.is_observed(node) {
        return Err(Error::InvalidArgument(format!(
            "node {node} is observed; tasks are only built for missing nodes"
        )));
    }
    let neighbor_values = graph
        .neighbors(node)?
        .into_iter()
        .filter(|&j| model.is_observed(j))
        .map(|j| processed[j])
        .collect();
    Ok(NodeTask {
        node,
        t,
        previous,
        earlier: Vec::new(),
        neighbor_values,
        precision,
    })
}

/// Fixed-point rendering with `precision` decimals; never prints `-0`.
pub fn format_number(value: f64, precision: usize) -> String {
    let s = format!("{value:.precision$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

fn format_list(values: &[f64], precision: usize) -> String {
    let items: Vec<String> = values.iter().map(|&v| format_number(v, precision)).collect();
    format!("[{}]", items.join(", "))
}

pub fn render_system_prompt() -> &'static str {
    SYSTEM_PROMPT
}

/// Renders the user message: one instruction header, then one indexed
/// context per task in the given order.
pub fn render_user_prompt(tasks: &[NodeTask]) -> Result<String> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot render an empty task list".into()))?;
    if let Some(other) = tasks.iter().find(|task| task.t != first.t) {
        return Err(Error::InvalidArgument(format!(
            "tasks mix time steps {} and {}",
            first.t, other.t
        )));
    }
    if let Some(other) = tasks.iter().find(|task| task.precision != first.precision) {
        return Err(Error::InvalidArgument(format!(
            "tasks mix precisions {} and {}",
            first.precision, other.precision
        )));
    }
    let p = first.precision;
    let mut out = format!(
        "Each indexed content is independent. Make 1 numeric prediction per indexed context. \
         Precision round to {p} decimal point. Do not output text. Do not recall memories."
    );
    for task in tasks {
        out.push_str(&format!(" Time {}, Entity index: {}.", task.t, task.node));
        if !task.earlier.is_empty() {
            out.push_str(&format!(" Earlier: {},", format_list(&task.earlier, p)));
        }
        out.push_str(&format!(
            " Previous: {}, Neighbors: {}.",
            format_number(task.previous, p),
            format_list(&task.neighbor_values, p)
        ));
    }
    Ok(out)
}

/// A rendered system/user message pair and the tasks it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system_text: String,
    pub user_text: String,
    pub task_refs: Vec<(usize, u64)>,
}

impl PromptPair {
    pub fn render(tasks: &[NodeTask]) -> Result<Self> {
        Ok(Self {
            system_text: render_system_prompt().to_string(),
            user_text: render_user_prompt(tasks)?,
            task_refs: tasks.iter().map(|task| (task.node, task.t)).collect(),
        })
    }

    /// Rough token count (four characters per token).
    pub fn estimated_tokens(&self) -> usize {
        (self.system_text.len() + self.user_text.len()).div_ceil(4)
    }
}

/// Why a completion could not be turned into predictions.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("expected {expected} numeric value(s), found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("completion contains a non-finite value: {0:?}")]
    NonFinite(String),
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?").unwrap())
}

fn non_finite_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:nan|inf|infinity)\b").unwrap())
}

fn enumeration_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // "1. ", "2) ", "3: ", "[4] ", "#5 " at the start of a line
    RE.get_or_init(|| Regex::new(r"(?m)^\s*(?:\d+[.):]|\[\d+\]|#\d+:?)\s+").unwrap())
}

/// Round half away from zero to `precision` decimals.
pub fn round_to(value: f64, precision: usize) -> f64 {
    let scale = 10f64.powi(precision as i32);
    (value * scale).round() / scale
}

/// Extracts exactly `expected` numbers from a completion, ignoring
/// surrounding prose and list enumerators, rounded to `precision`.
pub fn parse_completion(text: &str, expected: usize, precision: usize) -> Result<Vec<f64>, ParseError> {
    if let Some(m) = non_finite_re().find(text) {
        return Err(ParseError::NonFinite(m.as_str().to_string()));
    }
    let stripped = if expected > 1 {
        enumeration_re().replace_all(text, "")
    } else {
        std::borrow::Cow::Borrowed(text)
    };
    let mut values = Vec::new();
    for m in number_re().find_iter(&stripped) {
        let v: f64 = m
            .as_str()
            .parse()
            .map_err(|_| ParseError::NonFinite(m.as_str().to_string()))?;
        if !v.is_finite() {
            return Err(ParseError::NonFinite(m.as_str().to_string()));
        }
        values.push(round_to(v, precision));
    }
    if values.len() != expected {
        return Err(ParseError::CountMismatch {
            expected,
            found: values.len(),
        });
    }
    Ok(values)
}

/// One line of a prompt/response transcript (JSON-lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub t: u64,
    pub node: usize,
    pub prompt: String,
    pub completion: Option<String>,
    pub parsed: Option<f64>,
    pub attempts: u32,
}
