//! Run orchestration: dataset ingestion, generation, rephrasing, scoring,
//! analysis and report emission over a run directory.
//!
//! A run directory holds `config.json`, `generations.jsonl`,
//! `scores.jsonl`, `relaxed.jsonl`, `candidates.jsonl` and `analysis/`.

mod analysis;
mod dataset;
mod io;
mod report;
mod run;
mod scoring;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::AnalyticsError;
use crate::backend::{BackendConfig, BackendError, SamplingParams};
use crate::relaxed::{RelaxedError, RelaxedParams};

pub use analysis::{
    analyze, load_external_scores, AnalysisMode, AnalysisOutput, ExternalScore,
};
pub use dataset::{load_dataset, DatasetFormat, Payload, QaItem};
pub use io::{read_jsonl, write_jsonl};
pub use report::{aggregate, emit_matrix, emit_report, format_mean_stderr, ReportFormat, ReportRow};
pub use run::{
    open_prompt, rephrase_outputs, run_generation, Failure, GenerationRecord, StageSummary,
    REPHRASE_SYSTEM_PROMPT,
};
pub use scoring::{run_metrics, CandidateRecord, RelaxedRecord, ScoreRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid dataset: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("nothing to report: {0}")]
    EmptyInput(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than by
    /// the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::Validation(_) | HarnessError::Parse { .. }
        )
    }
}

impl From<RelaxedError> for HarnessError {
    fn from(e: RelaxedError) -> Self {
        match e {
            RelaxedError::Backend(b) => HarnessError::Backend(b),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

pub const NGRAM_METRICS: [&str; 4] = ["rouge1", "rouge2", "rougeL", "bleu"];
pub const PERPLEXITY_METRICS: [&str; 3] = ["word_perplexity", "byte_perplexity", "bits_per_byte"];
pub const MCQA_METRICS: [&str; 2] = ["acc", "acc_norm"];
pub const RELAXED_METRIC: &str = "relaxed_perplexity";

/// Every metric the harness computes itself, in reporting order.
pub fn native_metrics() -> Vec<&'static str> {
    NGRAM_METRICS
        .iter()
        .chain(&PERPLEXITY_METRICS)
        .chain(&MCQA_METRICS)
        .copied()
        .chain([RELAXED_METRIC])
        .collect()
}

/// Metrics computed when none are requested explicitly.
pub fn default_metrics() -> BTreeSet<String> {
    NGRAM_METRICS
        .iter()
        .chain(&PERPLEXITY_METRICS)
        .chain(["acc"].iter())
        .map(|s| s.to_string())
        .collect()
}

/// Whether smaller values are better for `metric`. Unknown (external)
/// metrics count as higher-is-better.
pub fn lower_is_better(metric: &str) -> bool {
    let base = metric.split(':').next().unwrap_or(metric);
    PERPLEXITY_METRICS.contains(&base) || base == RELAXED_METRIC
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_path: PathBuf,
    pub dataset_format: DatasetFormat,
    /// Label written into every score record.
    pub benchmark: String,
    pub backend: BackendConfig,
    pub metrics: BTreeSet<String>,
    /// Names of externally produced score columns accepted as metrics.
    #[serde(default)]
    pub external_columns: BTreeSet<String>,
    pub repetitions: usize,
    pub rephrasings: usize,
    /// Generation and rephrasing sampling; per-record seeds derive from `seed`.
    pub sampling: SamplingParams,
    pub relaxed: Option<RelaxedParams>,
    pub seed: Option<u64>,
    pub workers: usize,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(dataset_path: impl Into<PathBuf>, backend: BackendConfig, out_dir: impl Into<PathBuf>) -> Self {
        let dataset_path = dataset_path.into();
        let benchmark = dataset_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string();
        Self {
            dataset_format: DatasetFormat::from_path(&dataset_path),
            dataset_path,
            benchmark,
            backend,
            metrics: default_metrics(),
            external_columns: BTreeSet::new(),
            repetitions: 1,
            rephrasings: 0,
            sampling: SamplingParams {
                max_tokens: 256,
                ..SamplingParams::default()
            },
            relaxed: None,
            seed: None,
            workers: 4,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.metrics.is_empty() {
            return Err(HarnessError::Config("metric set is empty".into()));
        }
        let native = native_metrics();
        let unknown: Vec<&str> = self
            .metrics
            .iter()
            .map(String::as_str)
            .filter(|m| !native.contains(m) && !self.external_columns.contains(*m))
            .collect();
        if !unknown.is_empty() {
            return Err(HarnessError::Config(format!(
                "unknown metrics: {} (known: {})",
                unknown.join(", "),
                native.join(", ")
            )));
        }
        if self.repetitions < 1 {
            return Err(HarnessError::Config("repetitions must be at least 1".into()));
        }
        if self.workers < 1 {
            return Err(HarnessError::Config("workers must be at least 1".into()));
        }
        self.sampling
            .validate()
            .and_then(|_| self.backend.validate())
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(r) = &self.relaxed {
            r.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Requested metrics, plus relaxed perplexity when relaxed parameters
    /// are configured.
    pub fn effective_metrics(&self) -> BTreeSet<String> {
        let mut m = self.metrics.clone();
        if self.relaxed.is_some() {
            m.insert(RELAXED_METRIC.to_string());
        }
        m
    }

    pub fn relaxed_params(&self) -> RelaxedParams {
        self.relaxed.unwrap_or_default()
    }

    pub fn config_path(&self) -> PathBuf {
        self.out_dir.join("config.json")
    }
    pub fn generations_path(&self) -> PathBuf {
        self.out_dir.join("generations.jsonl")
    }
    pub fn scores_path(&self) -> PathBuf {
        self.out_dir.join("scores.jsonl")
    }
    pub fn relaxed_path(&self) -> PathBuf {
        self.out_dir.join("relaxed.jsonl")
    }
    pub fn candidates_path(&self) -> PathBuf {
        self.out_dir.join("candidates.jsonl")
    }
    pub fn analysis_dir(&self) -> PathBuf {
        self.out_dir.join("analysis")
    }

    /// Load `config.json` from `out_dir`, if present.
    pub fn load(out_dir: &Path) -> Result<Option<Self>, HarnessError> {
        let path = out_dir.join("config.json");
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.out_dir = out_dir.to_path_buf();
        Ok(Some(cfg))
    }

    /// Freeze this configuration into `config.json`.
    pub fn save(&self) -> Result<(), HarnessError> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| HarnessError::io(&self.out_dir, e))?;
        let text = serde_json::to_string_pretty(self).expect("config serializes") + "\n";
        io::write_atomic(&self.config_path(), text.as_bytes())
    }
}

/// Seed for one unit of work, derived from the run seed and a label path.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
