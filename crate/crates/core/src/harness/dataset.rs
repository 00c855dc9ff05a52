//! Dataset ingestion for open-ended, factuality-pair and multiple-choice items.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    Csv,
}

impl DatasetFormat {
    /// Guess from the file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "csv" => Ok(DatasetFormat::Csv),
            other => Err(format!("unknown dataset format {other:?} (expected jsonl or csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    FreeTarget { target: String },
    FactualityPair { must_have: String, nice_to_have: String },
    Mcqa { options: Vec<String>, gold_index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub question: String,
    pub payload: Payload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl QaItem {
    pub fn is_open_ended(&self) -> bool {
        !matches!(self.payload, Payload::Mcqa { .. })
    }

    /// Reference used for the perplexity family.
    pub fn primary_reference(&self) -> Option<&str> {
        match &self.payload {
            Payload::FreeTarget { target } => Some(target),
            Payload::FactualityPair { must_have, .. } => Some(must_have),
            Payload::Mcqa { .. } => None,
        }
    }

    /// References for n-gram metrics; the best match is reported.
    pub fn ngram_references(&self) -> Vec<&str> {
        match &self.payload {
            Payload::FreeTarget { target } => vec![target.as_str()],
            Payload::FactualityPair {
                must_have,
                nice_to_have,
            } => [must_have.as_str(), nice_to_have.as_str()]
                .into_iter()
                .filter(|s| !s.is_empty())
                .collect(),
            Payload::Mcqa { .. } => Vec::new(),
        }
    }

    /// Named relaxed-perplexity targets. Empty targets are skipped.
    pub fn relaxed_targets(&self) -> Vec<(&'static str, &str)> {
        let all = match &self.payload {
            Payload::FreeTarget { target } => vec![("target", target.as_str())],
            Payload::FactualityPair {
                must_have,
                nice_to_have,
            } => vec![
                ("must_have", must_have.as_str()),
                ("nice_to_have", nice_to_have.as_str()),
            ],
            Payload::Mcqa { .. } => Vec::new(),
        };
        all.into_iter().filter(|(_, t)| !t.is_empty()).collect()
    }
}

/// One input row as field name to JSON value, with its line number.
type Row = (usize, BTreeMap<String, Value>);

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<QaItem>, HarnessError> {
    let rows = match format {
        DatasetFormat::Jsonl => read_jsonl_rows(path)?,
        DatasetFormat::Csv => read_csv_rows(path)?,
    };
    let mut items = Vec::with_capacity(rows.len());
    let mut problems = Vec::new();
    for (line, row) in &rows {
        match item_from_row(*line, row) {
            Ok(item) => items.push(item),
            Err(p) => problems.push(p),
        }
    }
    let mut seen = HashSet::new();
    for item in &items {
        if !seen.insert(item.id.as_str()) {
            problems.push(format!("{}: duplicate id", item.id));
        }
    }
    if !problems.is_empty() {
        return Err(HarnessError::Validation(problems));
    }
    if items.is_empty() {
        return Err(HarnessError::Validation(vec![format!(
            "{}: dataset has no items",
            path.display()
        )]));
    }
    Ok(items)
}

fn read_jsonl_rows(path: &Path) -> Result<Vec<Row>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| HarnessError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        match value {
            Value::Object(map) => rows.push((i + 1, map.into_iter().collect())),
            _ => return Err(parse_err("expected a JSON object".into())),
        }
    }
    Ok(rows)
}

fn read_csv_rows(path: &Path) -> Result<Vec<Row>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let map = headers
            .iter()
            .zip(rec.iter())
            .filter(|(_, v)| !v.is_empty())
            .map(|(h, v)| (h.to_string(), Value::String(v.to_string())))
            .collect();
        rows.push((line, map));
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> HarnessError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    HarnessError::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn text_field(row: &BTreeMap<String, Value>, key: &str) -> Option<String> {
    match row.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Array(xs) => Some(
            xs.iter()
                .map(|x| match x {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(" "),
        ),
        Value::Null => None,
        other => Some(other.to_string()),
    }
}

fn index_field(row: &BTreeMap<String, Value>, key: &str) -> Result<Option<i64>, String> {
    match row.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n
            .as_i64()
            .map(Some)
            .ok_or_else(|| format!("{key} must be an integer")),
        Some(Value::String(s)) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("{key} must be an integer, got {s:?}")),
        Some(_) => Err(format!("{key} must be an integer")),
    }
}

fn item_from_row(line: usize, row: &BTreeMap<String, Value>) -> Result<QaItem, String> {
    let id = text_field(row, "id").unwrap_or_else(|| format!("line{line}"));
    let fail = |msg: String| format!("{id}: {msg}");
    let question = text_field(row, "question")
        .filter(|q| !q.trim().is_empty())
        .ok_or_else(|| fail("missing or empty question".into()))?;

    let mut op_options = Vec::new();
    while let Some(o) = text_field(row, &format!("op{}", op_options.len() + 1)) {
        op_options.push(o);
    }
    let listed_options = match row.get("options") {
        Some(Value::Array(xs)) => Some(
            xs.iter()
                .map(|x| x.as_str().map(String::from).unwrap_or_else(|| x.to_string()))
                .collect::<Vec<_>>(),
        ),
        Some(_) => return Err(fail("options must be a list".into())),
        None => None,
    };

    let payload = if listed_options.is_some() || !op_options.is_empty() {
        let (options, gold) = match listed_options {
            Some(opts) => (opts, index_field(row, "gold_index").map_err(&fail)?),
            None => {
                // `cop` counts from 1.
                let cop = index_field(row, "cop").map_err(&fail)?;
                (op_options, cop.map(|c| c - 1))
            }
        };
        if !(2..=26).contains(&options.len()) {
            return Err(fail(format!("needs 2 to 26 options, has {}", options.len())));
        }
        let gold = gold.ok_or_else(|| fail("missing gold answer index".into()))?;
        if gold < 0 || gold as usize >= options.len() {
            return Err(fail(format!("gold answer index out of range for {} options", options.len())));
        }
        Payload::Mcqa {
            options,
            gold_index: gold as usize,
        }
    } else if let Some(must_have) = text_field(row, "must_have") {
        if must_have.trim().is_empty() {
            return Err(fail("must_have is empty".into()));
        }
        Payload::FactualityPair {
            must_have,
            nice_to_have: text_field(row, "nice_to_have").unwrap_or_default(),
        }
    } else if let Some(target) = text_field(row, "target").or_else(|| text_field(row, "answer")) {
        if target.trim().is_empty() {
            return Err(fail("target is empty".into()));
        }
        Payload::FreeTarget { target }
    } else {
        return Err(fail("no target, must_have, or answer options".into()));
    };

    Ok(QaItem {
        id,
        question,
        payload,
        category: text_field(row, "category"),
    })
}
