//! Pivot score records into matrices and run the analytics over them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::io::write_atomic;
use super::scoring::ScoreRecord;
use super::{lower_is_better, native_metrics, HarnessError};
use crate::analytics::{
    column_range, correlation_matrix, rank_models, resilience, self_consistency, Axis,
    CorrelationMethod, Direction, ScoreMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    CorrelateMetrics,
    CorrelateBenchmarks,
    Resilience,
    SelfConsistency,
    Rank,
}

impl AnalysisMode {
    pub const ALL: [AnalysisMode; 5] = [
        AnalysisMode::CorrelateMetrics,
        AnalysisMode::CorrelateBenchmarks,
        AnalysisMode::Resilience,
        AnalysisMode::SelfConsistency,
        AnalysisMode::Rank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalysisMode::CorrelateMetrics => "correlate_metrics",
            AnalysisMode::CorrelateBenchmarks => "correlate_benchmarks",
            AnalysisMode::Resilience => "resilience",
            AnalysisMode::SelfConsistency => "self_consistency",
            AnalysisMode::Rank => "rank",
        }
    }
}

impl std::str::FromStr for AnalysisMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AnalysisMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown analysis mode {s:?}"))
    }
}

/// One value from a user-supplied score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalScore {
    pub source: String,
    pub model: String,
    pub benchmark: String,
    pub item_id: Option<String>,
    pub metric: String,
    pub value: f64,
}

/// Read a CSV with `model` and `benchmark` columns, an optional `item_id`
/// column, and one column per external metric. Empty and `nan` cells are
/// skipped.
pub fn load_external_scores(path: &Path) -> Result<Vec<ExternalScore>, HarnessError> {
    let parse_err = |line: usize, message: String| HarnessError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(mc), Some(bc)) = (col("model"), col("benchmark")) else {
        return Err(HarnessError::Config(format!(
            "{}: external score tables need model and benchmark columns",
            path.display()
        )));
    };
    let ic = col("item_id");
    let source = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        for (i, h) in headers.iter().enumerate() {
            if i == mc || i == bc || Some(i) == ic {
                continue;
            }
            let cell = rec.get(i).unwrap_or("").trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                continue;
            }
            let value: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("column {h}: not a number: {cell:?}")))?;
            out.push(ExternalScore {
                source: source.clone(),
                model: rec[mc].to_string(),
                benchmark: rec[bc].to_string(),
                item_id: ic.map(|c| rec[c].to_string()).filter(|s| !s.is_empty()),
                metric: h.to_string(),
                value,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutput {
    pub mode: AnalysisMode,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

struct Obs {
    model: String,
    benchmark: String,
    item: Option<String>,
    repetition: usize,
    rephrasing: usize,
    column: String,
    value: f64,
}

fn observations(records: &[ScoreRecord], external: &[ExternalScore]) -> Vec<Obs> {
    let native = records.iter().filter_map(|r| {
        Some(Obs {
            value: r.value?,
            model: r.model.clone(),
            benchmark: r.benchmark.clone(),
            item: Some(r.item_id.clone()),
            repetition: r.repetition,
            rephrasing: r.rephrasing,
            column: r.column(),
        })
    });
    let ext = external.iter().map(|e| Obs {
        model: e.model.clone(),
        benchmark: e.benchmark.clone(),
        item: e.item_id.clone(),
        repetition: 0,
        rephrasing: 0,
        column: e.metric.clone(),
        value: e.value,
    });
    native.chain(ext).collect()
}

/// Native metrics first in their reporting order, then everything else
/// alphabetically.
fn column_order(cols: &BTreeSet<String>) -> Vec<String> {
    let native = native_metrics();
    let mut v: Vec<String> = cols.iter().cloned().collect();
    v.sort_by_key(|c| {
        let base = c.split(':').next().unwrap_or(c);
        (native.iter().position(|m| *m == base).unwrap_or(usize::MAX), c.clone())
    });
    v
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Cell value per (model, benchmark, column): the mean over items of each
/// item's mean over repetitions, original outputs only.
fn pivot_cells(obs: &[Obs]) -> BTreeMap<(String, String, String), f64> {
    let mut per_item: BTreeMap<(&str, &str, &str, Option<&str>), Vec<f64>> = BTreeMap::new();
    for o in obs.iter().filter(|o| o.rephrasing == 0) {
        per_item
            .entry((&o.model, &o.benchmark, &o.column, o.item.as_deref()))
            .or_default()
            .push(o.value);
    }
    let mut cells: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for ((m, b, c, _), xs) in per_item {
        cells
            .entry((m.to_string(), b.to_string(), c.to_string()))
            .or_default()
            .push(mean(&xs));
    }
    cells.into_iter().map(|(k, xs)| (k, mean(&xs))).collect()
}

fn matrix(
    rows: &[String],
    cols: &[String],
    cell: impl Fn(&str, &str) -> Option<f64>,
) -> Result<ScoreMatrix, HarnessError> {
    let values = rows
        .iter()
        .map(|r| cols.iter().map(|c| cell(r, c)).collect())
        .collect();
    Ok(ScoreMatrix::new(rows.to_vec(), cols.to_vec(), values)?)
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(v).expect("json serializes") + "\n";
    write_atomic(path, text.as_bytes())
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn matrix(&mut self, stem: &str, m: &ScoreMatrix, extra: serde_json::Value) -> Result<(), HarnessError> {
        let csv_path = self.dir.join(format!("{stem}.csv"));
        write_atomic(&csv_path, m.to_csv().as_bytes())?;
        let mut j = m.to_plot_json();
        if let (Some(obj), serde_json::Value::Object(more)) = (j.as_object_mut(), extra) {
            obj.extend(more);
        }
        let json_path = self.dir.join(format!("{stem}.json"));
        write_json(&json_path, &j)?;
        self.files.push(csv_path);
        self.files.push(json_path);
        Ok(())
    }

    fn json(&mut self, stem: &str, v: &serde_json::Value) -> Result<(), HarnessError> {
        let path = self.dir.join(format!("{stem}.json"));
        write_json(&path, v)?;
        self.files.push(path);
        Ok(())
    }
}

/// Run one analysis mode and write its CSV and JSON files into `out_dir`.
pub fn analyze(
    records: &[ScoreRecord],
    external: &[ExternalScore],
    mode: AnalysisMode,
    method: CorrelationMethod,
    out_dir: &Path,
) -> Result<AnalysisOutput, HarnessError> {
    let obs = observations(records, external);
    if obs.is_empty() {
        return Err(HarnessError::InsufficientData("no score values to analyze".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut w = Writer {
        dir: out_dir,
        files: Vec::new(),
    };
    let mut warnings = Vec::new();
    if !external.is_empty() {
        let unmatched = unmatched_external(records, external);
        if !unmatched.is_empty() {
            warnings.push(format!("{} external score keys match no native record", unmatched.len()));
        }
        w.json("unmatched_external", &json!(unmatched))?;
    }
    match mode {
        AnalysisMode::CorrelateMetrics => correlate(&obs, true, method, &mut w, &mut warnings)?,
        AnalysisMode::CorrelateBenchmarks => correlate(&obs, false, method, &mut w, &mut warnings)?,
        AnalysisMode::Resilience => resilience_mode(&obs, &mut w)?,
        AnalysisMode::SelfConsistency => consistency_mode(&obs, &mut w)?,
        AnalysisMode::Rank => rank_mode(&obs, &mut w)?,
    }
    for warning in &warnings {
        log::warn!("{}: {warning}", mode.name());
    }
    Ok(AnalysisOutput {
        mode,
        files: w.files,
        warnings,
    })
}

fn unmatched_external(records: &[ScoreRecord], external: &[ExternalScore]) -> Vec<serde_json::Value> {
    let pairs: BTreeSet<(&str, &str)> = records.iter().map(|r| (r.model.as_str(), r.benchmark.as_str())).collect();
    let items: BTreeSet<(&str, &str, &str)> = records
        .iter()
        .map(|r| (r.model.as_str(), r.benchmark.as_str(), r.item_id.as_str()))
        .collect();
    let mut out = BTreeSet::new();
    for e in external {
        let matched = match &e.item_id {
            Some(i) => items.contains(&(e.model.as_str(), e.benchmark.as_str(), i.as_str())),
            None => pairs.contains(&(e.model.as_str(), e.benchmark.as_str())),
        };
        if !matched {
            out.insert((e.source.clone(), e.model.clone(), e.benchmark.clone(), e.item_id.clone()));
        }
    }
    out.into_iter()
        .map(|(source, model, benchmark, item_id)| {
            json!({"source": source, "model": model, "benchmark": benchmark, "item_id": item_id})
        })
        .collect()
}

/// Metric correlations per benchmark (`by_metric`) or benchmark
/// correlations per metric; models are the observations in both.
fn correlate(
    obs: &[Obs],
    by_metric: bool,
    method: CorrelationMethod,
    w: &mut Writer,
    warnings: &mut Vec<String>,
) -> Result<(), HarnessError> {
    let cells = pivot_cells(obs);
    // group label -> (models, variables)
    let mut groups: BTreeMap<String, (BTreeSet<String>, BTreeSet<String>)> = BTreeMap::new();
    for (m, b, c) in cells.keys() {
        let (group, var) = if by_metric { (b, c) } else { (c, b) };
        let g = groups.entry(group.clone()).or_default();
        g.0.insert(m.clone());
        g.1.insert(var.clone());
    }
    let (prefix, axis_name) = if by_metric {
        ("correlate_metrics", "benchmark")
    } else {
        ("correlate_benchmarks", "metric")
    };
    let mut written = 0;
    for (group, (models, vars)) in &groups {
        if models.len() < 2 {
            warnings.push(format!("{axis_name} {group}: only {} model(s), need at least 2", models.len()));
            continue;
        }
        if models.len() == 2 {
            warnings.push(format!("{axis_name} {group}: only 2 models, correlations are +-1 or missing"));
        }
        let rows: Vec<String> = models.iter().cloned().collect();
        let cols = if by_metric { column_order(vars) } else { vars.iter().cloned().collect() };
        let m = matrix(&rows, &cols, |model, var| {
            let key = if by_metric {
                (model.to_string(), group.clone(), var.to_string())
            } else {
                (model.to_string(), var.to_string(), group.clone())
            };
            cells.get(&key).copied()
        })?;
        let c = correlation_matrix(&m, Axis::Columns, method)?;
        let extra = json!({axis_name: group, "method": method, "n_models": models.len()});
        w.matrix(&format!("{prefix}__{}", file_stem(group)), &c, extra)?;
        written += 1;
    }
    if written == 0 {
        return Err(HarnessError::InsufficientData(format!(
            "{prefix} needs scores from at least 2 models along the model axis"
        )));
    }
    Ok(())
}

type ModelColumn = (String, String);

/// Values per prompt, per (model, column). `key` picks the prompt label and
/// `keep` the observations that take part.
fn group_by_prompt(
    obs: &[Obs],
    keep: impl Fn(&Obs) -> bool,
    key: impl Fn(&Obs) -> String,
    order: impl Fn(&Obs) -> usize,
) -> BTreeMap<ModelColumn, BTreeMap<String, Vec<f64>>> {
    let mut tmp: BTreeMap<ModelColumn, BTreeMap<String, Vec<(usize, f64)>>> = BTreeMap::new();
    for o in obs.iter().filter(|o| keep(o)) {
        tmp.entry((o.model.clone(), o.column.clone()))
            .or_default()
            .entry(key(o))
            .or_default()
            .push((order(o), o.value));
    }
    tmp.into_iter()
        .map(|(mc, prompts)| {
            let prompts = prompts
                .into_iter()
                .filter(|(_, v)| v.len() >= 2)
                .map(|(p, mut v)| {
                    v.sort_by_key(|(i, _)| *i);
                    (p, v.into_iter().map(|(_, x)| x).collect())
                })
                .collect::<BTreeMap<_, _>>();
            (mc, prompts)
        })
        .filter(|(_, p)| !p.is_empty())
        .collect()
}

fn models_and_columns<T>(groups: &BTreeMap<ModelColumn, T>) -> (Vec<String>, Vec<String>) {
    let models: BTreeSet<String> = groups.keys().map(|(m, _)| m.clone()).collect();
    let cols: BTreeSet<String> = groups.keys().map(|(_, c)| c.clone()).collect();
    (models.into_iter().collect(), column_order(&cols))
}

fn resilience_mode(obs: &[Obs], w: &mut Writer) -> Result<(), HarnessError> {
    let groups = group_by_prompt(
        obs,
        |o| o.item.is_some(),
        |o| format!("{}/{}/{}", o.benchmark, o.item.as_deref().unwrap_or(""), o.repetition),
        |o| o.rephrasing,
    );
    if groups.is_empty() {
        return Err(HarnessError::InsufficientData(
            "resilience needs at least 2 variants (original plus rephrasings) per output".into(),
        ));
    }
    let mut ranges = BTreeMap::new();
    for (_, col) in groups.keys() {
        ranges.entry(col.clone()).or_insert_with(|| {
            column_range(obs.iter().filter(|o| &o.column == col).map(|o| &o.value))
        });
    }
    let mut reports = BTreeMap::new();
    for ((model, col), prompts) in &groups {
        reports.insert((model.clone(), col.clone()), resilience(prompts, ranges[col])?);
    }
    let (models, cols) = models_and_columns(&groups);
    let m = matrix(&models, &cols, |model, col| {
        reports.get(&(model.to_string(), col.to_string())).map(|r| r.mean)
    })?;
    let mut detail: BTreeMap<&str, BTreeMap<&str, serde_json::Value>> = BTreeMap::new();
    for ((model, col), r) in &reports {
        detail
            .entry(model)
            .or_default()
            .insert(col, json!({"mean": r.mean, "scaled_variances": r.scaled_variances}));
    }
    w.matrix("resilience", &m, json!({"column_ranges": ranges, "models": detail}))
}

fn consistency_mode(obs: &[Obs], w: &mut Writer) -> Result<(), HarnessError> {
    let groups = group_by_prompt(
        obs,
        |o| o.rephrasing == 0 && o.item.is_some(),
        |o| format!("{}/{}", o.benchmark, o.item.as_deref().unwrap_or("")),
        |o| o.repetition,
    );
    if groups.is_empty() {
        return Err(HarnessError::InsufficientData(
            "self_consistency needs at least 2 repetitions per prompt".into(),
        ));
    }
    let mut reports = BTreeMap::new();
    for (mc, prompts) in &groups {
        reports.insert(mc.clone(), self_consistency(prompts)?);
    }
    let (models, cols) = models_and_columns(&groups);
    let var = matrix(&models, &cols, |m, c| {
        reports.get(&(m.to_string(), c.to_string())).map(|r| r.mean_variance)
    })?;
    let cv = matrix(&models, &cols, |m, c| {
        reports.get(&(m.to_string(), c.to_string())).and_then(|r| r.mean_cv())
    })?;
    let mut detail: BTreeMap<&str, BTreeMap<&str, serde_json::Value>> = BTreeMap::new();
    for ((model, col), r) in &reports {
        detail.entry(model).or_default().insert(
            col,
            json!({
                "mean_variance": r.mean_variance,
                "mean_cv": r.mean_cv(),
                "per_prompt_variance": r.per_prompt_variance,
                "cv": r.cv,
            }),
        );
    }
    w.matrix("self_consistency_variance", &var, json!({"models": detail}))?;
    w.matrix("self_consistency_cv", &cv, json!({}))
}

fn rank_mode(obs: &[Obs], w: &mut Writer) -> Result<(), HarnessError> {
    let cells = pivot_cells(obs);
    let benchmarks: BTreeSet<&str> = cells.keys().map(|(_, b, _)| b.as_str()).collect();
    if benchmarks.is_empty() {
        return Err(HarnessError::InsufficientData("rank needs original (non-rephrased) scores".into()));
    }
    for bench in benchmarks {
        let models: BTreeSet<String> = cells.keys().filter(|k| k.1 == bench).map(|k| k.0.clone()).collect();
        let cols: BTreeSet<String> = cells.keys().filter(|k| k.1 == bench).map(|k| k.2.clone()).collect();
        let models: Vec<String> = models.into_iter().collect();
        let cols = column_order(&cols);
        let scores = matrix(&models, &cols, |m, c| {
            cells.get(&(m.to_string(), bench.to_string(), c.to_string())).copied()
        })?;
        let mut ranks: BTreeMap<(String, String), usize> = BTreeMap::new();
        for c in &cols {
            let dir = if lower_is_better(c) {
                Direction::LowerBetter
            } else {
                Direction::HigherBetter
            };
            for (m, r) in rank_models(&scores, c, dir)? {
                ranks.insert((m, c.clone()), r);
            }
        }
        let rm = matrix(&models, &cols, |m, c| {
            ranks.get(&(m.to_string(), c.to_string())).map(|r| *r as f64)
        })?;
        let directions: BTreeMap<&str, &str> = cols
            .iter()
            .map(|c| (c.as_str(), if lower_is_better(c) { "lower_better" } else { "higher_better" }))
            .collect();
        w.matrix(
            &format!("rank__{}", file_stem(bench)),
            &rm,
            json!({"benchmark": bench, "directions": directions, "scores": scores.values}),
        )?;
    }
    Ok(())
}
