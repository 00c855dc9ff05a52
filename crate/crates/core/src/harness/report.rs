//! Tabular reports of aggregated scores and analysis matrices.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::write_atomic;
use super::scoring::ScoreRecord;
use super::{native_metrics, HarnessError};
use crate::analytics::{format_cell, population_variance, ScoreMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// Mean of one metric over a benchmark's items, with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub benchmark: String,
    pub metric: String,
    pub value: Option<f64>,
    pub stderr: Option<f64>,
    /// Items contributing a value.
    pub n: usize,
}

/// Aggregate original-output records per (model, benchmark, metric).
///
/// Each item contributes its mean over repetitions; the reported value is
/// the mean over items and the standard error is `sqrt(var / n)` with the
/// population variance, which for 0/1 accuracies is `sqrt(acc (1 - acc) / n)`.
pub fn aggregate(records: &[ScoreRecord]) -> Vec<ReportRow> {
    let mut per_item: BTreeMap<(String, String, String), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.rephrasing == 0) {
        let items = per_item
            .entry((r.model.clone(), r.benchmark.clone(), r.column()))
            .or_default();
        let slot = items.entry(r.item_id.as_str()).or_default();
        if let Some(v) = r.value {
            slot.push(v);
        }
    }
    let mut rows: Vec<ReportRow> = per_item
        .into_iter()
        .map(|((model, benchmark, metric), items)| {
            let means: Vec<f64> = items
                .values()
                .filter(|v| !v.is_empty())
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .collect();
            let n = means.len();
            let (value, stderr) = if n == 0 {
                (None, None)
            } else {
                let m = means.iter().sum::<f64>() / n as f64;
                (Some(m), Some((population_variance(&means) / n as f64).sqrt()))
            };
            ReportRow {
                model,
                benchmark,
                metric,
                value,
                stderr,
                n,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (&a.model, &a.benchmark, metric_order(&a.metric))
            .cmp(&(&b.model, &b.benchmark, metric_order(&b.metric)))
    });
    rows
}

/// Native metrics in reporting order, then the rest alphabetically.
fn metric_order(m: &str) -> (usize, String) {
    let base = m.split(':').next().unwrap_or(m);
    let pos = native_metrics().iter().position(|x| *x == base);
    (pos.unwrap_or(usize::MAX), m.to_string())
}

/// `"0.750 ± 0.097"`, or `"nan"` when there is no value.
pub fn format_mean_stderr(value: Option<f64>, stderr: Option<f64>) -> String {
    match (value, stderr) {
        (Some(v), Some(s)) if v.is_finite() && s.is_finite() => format!("{v:.3} ± {s:.3}"),
        (Some(v), _) if v.is_finite() => format!("{v:.3} ± nan"),
        _ => "nan".to_string(),
    }
}

fn render_rows(rows: &[ReportRow], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["model", "benchmark", "metric", "value", "stderr", "n"]).unwrap();
            for r in rows {
                w.write_record([
                    r.model.clone(),
                    r.benchmark.clone(),
                    r.metric.clone(),
                    format_cell(r.value),
                    format_cell(r.stderr),
                    r.n.to_string(),
                ])
                .unwrap();
            }
            String::from_utf8(w.into_inner().unwrap()).unwrap()
        }
        ReportFormat::Json => serde_json::to_string_pretty(rows).expect("rows serialize") + "\n",
        ReportFormat::Markdown => {
            let mut metrics: Vec<&str> = rows
                .iter()
                .map(|r| r.metric.as_str())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            metrics.sort_by_key(|m| metric_order(m));
            let mut cells: BTreeMap<(&str, &str), BTreeMap<&str, String>> = BTreeMap::new();
            for r in rows {
                cells
                    .entry((&r.model, &r.benchmark))
                    .or_default()
                    .insert(&r.metric, format_mean_stderr(r.value, r.stderr));
            }
            let mut out = String::new();
            out.push_str(&format!("| model | benchmark | {} |\n", metrics.join(" | ")));
            out.push_str(&format!("|---|---|{}\n", "---|".repeat(metrics.len())));
            for ((model, bench), row) in &cells {
                let vals: Vec<&str> = metrics
                    .iter()
                    .map(|m| row.get(m).map_or("nan", String::as_str))
                    .collect();
                out.push_str(&format!("| {model} | {bench} | {} |\n", vals.join(" | ")));
            }
            out
        }
    }
}

/// Write aggregated rows to `path`. Nothing is written for empty input.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyInput("no score rows".into()));
    }
    write_atomic(path, render_rows(rows, format).as_bytes())
}

/// Write an analysis matrix to `path`, three decimals in markdown.
pub fn emit_matrix(m: &ScoreMatrix, format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
    if m.n_rows() == 0 || m.n_cols() == 0 {
        return Err(HarnessError::EmptyInput("empty matrix".into()));
    }
    let text = match format {
        ReportFormat::Csv => m.to_csv(),
        ReportFormat::Json => serde_json::to_string_pretty(&m.to_plot_json()).unwrap() + "\n",
        ReportFormat::Markdown => {
            let mut out = format!("| | {} |\n", m.col_labels.join(" | "));
            out.push_str(&format!("|---|{}\n", "---|".repeat(m.n_cols())));
            for (label, row) in m.row_labels.iter().zip(&m.values) {
                let vals: Vec<String> = row
                    .iter()
                    .map(|v| match v {
                        Some(x) if x.is_finite() => format!("{x:.3}"),
                        _ => "nan".into(),
                    })
                    .collect();
                out.push_str(&format!("| {label} | {} |\n", vals.join(" | ")));
            }
            out
        }
    };
    write_atomic(path, text.as_bytes())
}
