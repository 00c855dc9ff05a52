//! Analyses over score tables: correlation matrices, rephrasing resilience,
//! self-consistency and model rankings.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("column range is zero")]
    ZeroRange,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("malformed table: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Labelled dense matrix with explicit missing cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl ScoreMatrix {
    pub fn new(
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        values: Vec<Vec<Option<f64>>>,
    ) -> Result<Self, AnalyticsError> {
        if values.len() != row_labels.len() || values.iter().any(|r| r.len() != col_labels.len()) {
            return Err(AnalyticsError::Malformed(format!(
                "{} row labels and {} column labels do not match the values",
                row_labels.len(),
                col_labels.len()
            )));
        }
        Ok(Self {
            row_labels,
            col_labels,
            values,
        })
    }

    pub fn from_dense(row_labels: Vec<String>, col_labels: Vec<String>, dense: Vec<Vec<f64>>) -> Result<Self, AnalyticsError> {
        let values = dense
            .into_iter()
            .map(|r| r.into_iter().map(Some).collect())
            .collect();
        Self::new(row_labels, col_labels, values)
    }

    pub fn n_rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row][col]
    }

    pub fn column(&self, col: usize) -> Vec<Option<f64>> {
        self.values.iter().map(|r| r[col]).collect()
    }

    pub fn transpose(&self) -> Self {
        let values = (0..self.n_cols()).map(|c| self.column(c)).collect();
        Self {
            row_labels: self.col_labels.clone(),
            col_labels: self.row_labels.clone(),
            values,
        }
    }

    /// CSV with the row label in the first column; missing cells are `nan`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.col_labels.iter().cloned());
        w.write_record(&header).unwrap();
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| format_cell(*v)));
            w.write_record(&rec).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn from_csv_reader<R: io::Read>(reader: R) -> Result<Self, AnalyticsError> {
        let mut r = csv::Reader::from_reader(reader);
        let col_labels: Vec<String> = r.headers()?.iter().skip(1).map(String::from).collect();
        let mut row_labels = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            row_labels.push(rec.get(0).unwrap_or_default().to_string());
            values.push(rec.iter().skip(1).map(parse_cell).collect::<Result<Vec<_>, _>>()?);
        }
        Self::new(row_labels, col_labels, values)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, AnalyticsError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    /// Labels plus values, for external plotting.
    pub fn to_plot_json(&self) -> serde_json::Value {
        serde_json::json!({
            "row_labels": self.row_labels,
            "col_labels": self.col_labels,
            "values": self.values,
        })
    }
}

pub fn format_cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => "nan".to_string(),
    }
}

fn parse_cell(s: &str) -> Result<Option<f64>, AnalyticsError> {
    let t = s.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    t.parse::<f64>()
        .map(|v| v.is_finite().then_some(v))
        .map_err(|_| AnalyticsError::Malformed(format!("not a number: {t:?}")))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divide by N), by Welford's update. Identical
/// values give exactly zero.
pub fn population_variance(xs: &[f64]) -> f64 {
    let (mut m, mut m2) = (0.0, 0.0);
    for (i, x) in xs.iter().enumerate() {
        let d = x - m;
        m += d / (i + 1) as f64;
        m2 += d * (x - m);
    }
    m2 / xs.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalyticsError> {
    if x.len() != y.len() {
        return Err(AnalyticsError::DegenerateInput(format!(
            "lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(AnalyticsError::DegenerateInput("fewer than two observations".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalyticsError::DegenerateInput("constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, AnalyticsError> {
    if x.len() != y.len() {
        return Err(AnalyticsError::DegenerateInput("lengths differ".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    #[default]
    Pearson,
    Spearman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Correlate columns with each other, rows are observations.
    Columns,
    /// Correlate rows with each other, columns are observations.
    Rows,
}

/// Pairwise correlation matrix along `axis`, using pairwise-complete
/// observations. Degenerate pairs come out as missing cells.
pub fn correlation_matrix(
    m: &ScoreMatrix,
    axis: Axis,
    method: CorrelationMethod,
) -> Result<ScoreMatrix, AnalyticsError> {
    let m = match axis {
        Axis::Columns => m.clone(),
        Axis::Rows => m.transpose(),
    };
    if m.n_rows() < 2 {
        return Err(AnalyticsError::InsufficientData(format!(
            "need at least 2 observations, have {}",
            m.n_rows()
        )));
    }
    let k = m.n_cols();
    let cols: Vec<Vec<Option<f64>>> = (0..k).map(|c| m.column(c)).collect();
    let mut out = vec![vec![None; k]; k];
    for i in 0..k {
        out[i][i] = Some(1.0);
        for j in (i + 1)..k {
            let (x, y): (Vec<f64>, Vec<f64>) = cols[i]
                .iter()
                .zip(&cols[j])
                .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
                .unzip();
            let r = match method {
                CorrelationMethod::Pearson => pearson(&x, &y),
                CorrelationMethod::Spearman => spearman(&x, &y),
            }
            .ok();
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    ScoreMatrix::new(m.col_labels.clone(), m.col_labels.clone(), out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceReport {
    pub scaled_variances: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Per-prompt population variance across rephrasings, divided by the range
/// (max − min) of the metric column. A zero range gives zero variances.
pub fn resilience(
    variant_scores: &BTreeMap<String, Vec<f64>>,
    column_range: f64,
) -> Result<ResilienceReport, AnalyticsError> {
    if variant_scores.is_empty() {
        return Err(AnalyticsError::InsufficientData("no prompts".into()));
    }
    if let Some((p, _)) = variant_scores.iter().find(|(_, v)| v.len() < 2) {
        return Err(AnalyticsError::InsufficientData(format!(
            "prompt {p:?} has fewer than 2 variants"
        )));
    }
    if !(column_range >= 0.0) {
        return Err(AnalyticsError::DegenerateInput(format!(
            "column range must be non-negative, got {column_range}"
        )));
    }
    let scaled_variances: BTreeMap<String, f64> = variant_scores
        .iter()
        .map(|(p, v)| {
            let s = if column_range == 0.0 {
                0.0
            } else {
                population_variance(v) / column_range
            };
            (p.clone(), s)
        })
        .collect();
    let mean = scaled_variances.values().sum::<f64>() / scaled_variances.len() as f64;
    Ok(ResilienceReport {
        scaled_variances,
        mean,
    })
}

/// Max − min over every value.
pub fn column_range<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (lo, hi) = values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub per_prompt_variance: BTreeMap<String, f64>,
    pub mean_variance: f64,
    /// Coefficient of variation; prompts with zero mean are left out.
    pub cv: BTreeMap<String, f64>,
}

impl ConsistencyReport {
    pub fn mean_cv(&self) -> Option<f64> {
        (!self.cv.is_empty()).then(|| self.cv.values().sum::<f64>() / self.cv.len() as f64)
    }
}

/// Per-prompt population variance and CV = σ / μ across repetitions.
pub fn self_consistency(
    repeat_scores: &BTreeMap<String, Vec<f64>>,
) -> Result<ConsistencyReport, AnalyticsError> {
    if repeat_scores.is_empty() {
        return Err(AnalyticsError::InsufficientData("no prompts".into()));
    }
    let mut per_prompt_variance = BTreeMap::new();
    let mut cv = BTreeMap::new();
    for (p, xs) in repeat_scores {
        if xs.len() < 2 {
            return Err(AnalyticsError::InsufficientData(format!(
                "prompt {p:?} has fewer than 2 repetitions"
            )));
        }
        let var = population_variance(xs);
        per_prompt_variance.insert(p.clone(), var);
        let mu = mean(xs);
        if mu != 0.0 {
            cv.insert(p.clone(), var.sqrt() / mu);
        }
    }
    let mean_variance = per_prompt_variance.values().sum::<f64>() / per_prompt_variance.len() as f64;
    Ok(ConsistencyReport {
        per_prompt_variance,
        mean_variance,
        cv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Rank rows on one column: 1 is best, tied rows share the better rank and
/// the next rank skips accordingly. Missing cells rank after every value.
pub fn rank_models(
    m: &ScoreMatrix,
    col: &str,
    direction: Direction,
) -> Result<Vec<(String, usize)>, AnalyticsError> {
    let c = m
        .col_labels
        .iter()
        .position(|l| l == col)
        .ok_or_else(|| AnalyticsError::UnknownColumn(col.to_string()))?;
    let key = |v: Option<f64>| -> Option<f64> {
        v.map(|x| match direction {
            Direction::HigherBetter => -x,
            Direction::LowerBetter => x,
        })
    };
    let mut order: Vec<usize> = (0..m.n_rows()).collect();
    let cmp = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    };
    order.sort_by(|&a, &b| cmp(key(m.get(a, c)), key(m.get(b, c))).then(a.cmp(&b)));
    let mut out = Vec::with_capacity(order.len());
    let mut rank = 0;
    for (pos, &r) in order.iter().enumerate() {
        let tied = pos > 0 && cmp(key(m.get(order[pos - 1], c)), key(m.get(r, c))).is_eq();
        if !tied {
            rank = pos + 1;
        }
        out.push((m.row_labels[r].clone(), rank));
    }
    Ok(out)
}
