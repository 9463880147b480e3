//! Report records written by the subcommands.

use std::fs;
use std::path::Path;

use contraction_core::transform::{MetricBounds, TransformPair};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub enabled: bool,
    pub pass: bool,
    pub worst_value: f64,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Check {
    pub fn new(name: &str, enabled: bool, pass: bool, worst_value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            enabled,
            pass,
            worst_value,
            // Adding +0 turns a negated zero rate into 0.
            threshold: threshold + 0.0,
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }

    /// A check that could not be evaluated.
    pub fn errored(name: &str, enabled: bool, threshold: f64, err: impl ToString) -> Self {
        Self::new(name, enabled, false, f64::NAN, threshold).with_detail(err.to_string())
    }

    pub fn blocks(&self) -> bool {
        self.enabled && !self.pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformSummary {
    pub lambda: Vec<f64>,
    pub r: Vec<Vec<f64>>,
    pub metric_bounds: MetricBounds,
}

impl TransformSummary {
    pub fn of(tp: &TransformPair) -> Self {
        Self {
            lambda: tp.lambda_diag(),
            r: (0..tp.r.nrows())
                .map(|i| tp.r.row(i).iter().cloned().collect())
                .collect(),
            metric_bounds: tp.metric_bounds(),
        }
    }
}

/// Deterministic work counters, in place of wall-clock time.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub margin_samples: usize,
    pub theorem1_samples: usize,
    pub pairs: usize,
    pub simulated_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub command: String,
    pub env: String,
    pub config_digest: String,
    pub checks: Vec<Check>,
    pub transforms: TransformSummary,
    pub timing: Timing,
}

impl Report {
    pub fn pass(&self) -> bool {
        !self.checks.iter().any(Check::blocks)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// NaN-safe JSON number: non-finite values serialize as `null`.
pub fn finite_or_nan(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}
