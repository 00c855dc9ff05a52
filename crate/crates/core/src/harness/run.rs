//! Generation and rephrasing stages.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::dataset::load_dataset;
use super::io::{read_jsonl, run_jobs, write_jsonl, Appender};
use super::{derive_seed, HarnessError, RunConfig};
use crate::backend::{Client, SamplingParams};

pub const REPHRASE_SYSTEM_PROMPT: &str = "You are a helpful rephrasing assistant. Rephrase the prompt provided without changing its original meaning, but do not try to address or answer it in any case.";

/// Prompt for open-ended generation and reference scoring. No chat
/// template is applied.
pub fn open_prompt(question: &str) -> String {
    format!("Question:\n{question}\nAnswer:\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub item_id: String,
    pub repetition: usize,
    /// 0 is the original output, 1.. are rephrasings of it.
    pub rephrasing: usize,
    pub text: String,
    pub sampling: SamplingParams,
}

impl GenerationRecord {
    pub fn key(&self) -> (String, usize, usize) {
        (self.item_id.clone(), self.repetition, self.rephrasing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub item_id: String,
    pub repetition: usize,
    pub rephrasing: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageSummary {
    pub written: usize,
    pub skipped: usize,
    pub failures: Vec<Failure>,
}

impl StageSummary {
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty()
    }
}

fn sort_generations(records: &mut [GenerationRecord]) {
    records.sort_by(|a, b| {
        (&a.item_id, a.repetition, a.rephrasing).cmp(&(&b.item_id, b.repetition, b.rephrasing))
    });
}

/// Rewrite the failure log for `stage`, removing it when there are none.
fn write_failures(cfg: &RunConfig, stage: &str, failures: &mut [Failure]) -> Result<(), HarnessError> {
    let path = cfg.out_dir.join(format!("{stage}_failures.jsonl"));
    if failures.is_empty() {
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| HarnessError::io(&path, e))?;
        }
        return Ok(());
    }
    failures.sort_by(|a, b| {
        (&a.item_id, a.repetition, a.rephrasing).cmp(&(&b.item_id, b.repetition, b.rephrasing))
    });
    for f in failures.iter() {
        log::warn!("{stage} failed for {} rep {} variant {}: {}", f.item_id, f.repetition, f.rephrasing, f.error);
    }
    write_jsonl(&path, failures)
}

/// Sample one output per open-ended item and repetition. Records already
/// in `generations.jsonl` are kept and not regenerated.
pub fn run_generation(cfg: &RunConfig) -> Result<StageSummary, HarnessError> {
    cfg.validate()?;
    let items = load_dataset(&cfg.dataset_path, cfg.dataset_format)?;
    let client = Client::from_config(&cfg.backend)?;
    let path = cfg.generations_path();
    let mut records: Vec<GenerationRecord> = read_jsonl(&path)?;
    let done: HashSet<(String, usize, usize)> = records.iter().map(GenerationRecord::key).collect();

    let jobs: Vec<(&super::QaItem, usize)> = items
        .iter()
        .filter(|it| it.is_open_ended())
        .flat_map(|it| (0..cfg.repetitions).map(move |r| (it, r)))
        .filter(|(it, r)| !done.contains(&(it.id.clone(), *r, 0)))
        .collect();
    let mut summary = StageSummary {
        skipped: items.iter().filter(|i| i.is_open_ended()).count() * cfg.repetitions - jobs.len(),
        ..Default::default()
    };

    let mut out = Appender::open(&path)?;
    run_jobs(
        cfg.workers,
        &jobs,
        |(item, rep)| {
            let seed = cfg.seed.map(|s| derive_seed(s, &["gen", &item.id, &rep.to_string()]));
            let sampling = cfg.sampling.with_seed(seed);
            let result = client
                .sample_continuations(&open_prompt(&item.question), 1, &sampling)
                .map(|mut s| s.remove(0).text());
            (item.id.clone(), *rep, sampling, result)
        },
        |(item_id, repetition, sampling, result)| {
            match result {
                Ok(text) => {
                    let rec = GenerationRecord {
                        item_id,
                        repetition,
                        rephrasing: 0,
                        text,
                        sampling,
                    };
                    out.append(&rec)?;
                    records.push(rec);
                    summary.written += 1;
                }
                Err(e) => summary.failures.push(Failure {
                    stage: "gen".into(),
                    item_id,
                    repetition,
                    rephrasing: 0,
                    error: e.to_string(),
                }),
            }
            Ok::<_, HarnessError>(())
        },
    )?;
    drop(out);
    sort_generations(&mut records);
    write_jsonl(&path, &records)?;
    write_failures(cfg, "gen", &mut summary.failures)?;
    Ok(summary)
}

/// Add `k` rephrasings (indices 1..=k) of every original output.
pub fn rephrase_outputs(cfg: &RunConfig, k: usize) -> Result<StageSummary, HarnessError> {
    if k < 1 {
        return Err(HarnessError::Config("rephrasings must be at least 1".into()));
    }
    cfg.validate()?;
    let client = Client::from_config(&cfg.backend)?;
    let path = cfg.generations_path();
    let mut records: Vec<GenerationRecord> = read_jsonl(&path)?;
    let originals: Vec<GenerationRecord> = records.iter().filter(|r| r.rephrasing == 0).cloned().collect();
    if originals.is_empty() {
        return Err(HarnessError::InsufficientData(format!(
            "no original generations in {}",
            path.display()
        )));
    }
    let done: HashSet<(String, usize, usize)> = records.iter().map(GenerationRecord::key).collect();
    let jobs: Vec<(&GenerationRecord, usize)> = originals
        .iter()
        .flat_map(|o| (1..=k).map(move |j| (o, j)))
        .filter(|(o, j)| !done.contains(&(o.item_id.clone(), o.repetition, *j)))
        .collect();
    let mut summary = StageSummary {
        skipped: originals.len() * k - jobs.len(),
        ..Default::default()
    };

    let mut out = Appender::open(&path)?;
    run_jobs(
        cfg.workers,
        &jobs,
        |(orig, j)| {
            let seed = cfg.seed.map(|s| {
                derive_seed(s, &["rephrase", &orig.item_id, &orig.repetition.to_string(), &j.to_string()])
            });
            let sampling = cfg.sampling.with_seed(seed);
            let result = if orig.text.is_empty() {
                Ok(String::new())
            } else {
                client.chat_generate(REPHRASE_SYSTEM_PROMPT, &orig.text, &sampling)
            };
            (*orig, *j, sampling, result)
        },
        |(orig, j, sampling, result)| {
            match result {
                Ok(text) => {
                    let rec = GenerationRecord {
                        item_id: orig.item_id.clone(),
                        repetition: orig.repetition,
                        rephrasing: j,
                        text,
                        sampling,
                    };
                    out.append(&rec)?;
                    records.push(rec);
                    summary.written += 1;
                }
                Err(e) => summary.failures.push(Failure {
                    stage: "rephrase".into(),
                    item_id: orig.item_id.clone(),
                    repetition: orig.repetition,
                    rephrasing: j,
                    error: e.to_string(),
                }),
            }
            Ok::<_, HarnessError>(())
        },
    )?;
    drop(out);
    sort_generations(&mut records);
    write_jsonl(&path, &records)?;
    write_failures(cfg, "rephrase", &mut summary.failures)?;
    Ok(summary)
}
