//! Metric computation over generations and references.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::dataset::{load_dataset, Payload, QaItem};
use super::io::{read_jsonl, run_jobs, write_jsonl, Appender};
use super::run::{open_prompt, GenerationRecord, StageSummary};
use super::{derive_seed, Failure, HarnessError, RunConfig, MCQA_METRICS, NGRAM_METRICS, PERPLEXITY_METRICS, RELAXED_METRIC};
use crate::backend::{Client, ScoredContinuation};
use crate::perplexity::{perplexity_family, score_mcqa_item, OptionNormalization};
use crate::relaxed::{candidate_prefixes, relaxed_with_candidates, CandidateSet, RelaxedParams};
use crate::text_metrics::NgramMetric;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub model: String,
    pub benchmark: String,
    pub item_id: String,
    pub repetition: usize,
    pub rephrasing: usize,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Missing when the metric failed; `error` then says why.
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

type ScoreKey = (String, usize, usize, String, Option<String>);

impl ScoreRecord {
    pub fn key(&self) -> ScoreKey {
        (
            self.item_id.clone(),
            self.repetition,
            self.rephrasing,
            self.metric.clone(),
            self.target.clone(),
        )
    }

    /// Column label used in analyses: the metric, qualified by the target
    /// name when an item has several targets.
    pub fn column(&self) -> String {
        match self.target.as_deref() {
            None | Some("target") => self.metric.clone(),
            Some(t) => format!("{}:{t}", self.metric),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedRecord {
    pub question_id: String,
    pub target_id: String,
    pub repetition: usize,
    pub relaxed_cross_entropy: f64,
    pub relaxed_perplexity: f64,
    pub relaxed_logprob_sum: f64,
    pub offsets: Vec<usize>,
    pub target_token_len: usize,
    pub over_unity_terms: usize,
    pub params: RelaxedParams,
}

/// Sampled candidates kept for replay, so reruns reuse the same prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub question_id: String,
    pub repetition: usize,
    pub continuations: Vec<ScoredContinuation>,
}

enum Job<'a> {
    Ngram(&'a QaItem, &'a GenerationRecord),
    Reference(&'a QaItem, usize),
    Relaxed(&'a QaItem, usize, Option<CandidateRecord>),
}

#[derive(Default)]
struct JobOutput {
    scores: Vec<ScoreRecord>,
    relaxed: Vec<RelaxedRecord>,
    candidates: Option<CandidateRecord>,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    client: Client,
    metrics: BTreeSet<String>,
}

impl Ctx<'_> {
    fn record(&self, item: &QaItem, rep: usize, reph: usize, metric: &str, target: Option<&str>) -> ScoreRecord {
        ScoreRecord {
            model: self.cfg.backend.model_name.clone(),
            benchmark: self.cfg.benchmark.clone(),
            item_id: item.id.clone(),
            repetition: rep,
            rephrasing: reph,
            metric: metric.to_string(),
            target: target.map(String::from),
            value: None,
            error: None,
        }
    }

    fn wants(&self, metric: &str) -> bool {
        self.metrics.contains(metric)
    }

    /// Score keys a job is expected to produce.
    fn expected(&self, job: &Job) -> Vec<ScoreKey> {
        let key = |item: &QaItem, rep, reph, m: &str, t: Option<&str>| {
            (item.id.clone(), rep, reph, m.to_string(), t.map(String::from))
        };
        match job {
            Job::Ngram(item, g) => NGRAM_METRICS
                .iter()
                .filter(|m| self.wants(m))
                .map(|m| key(item, g.repetition, g.rephrasing, m, None))
                .collect(),
            Job::Reference(item, rep) => {
                let ms: &[&str] = if item.is_open_ended() { &PERPLEXITY_METRICS } else { &MCQA_METRICS };
                ms.iter()
                    .filter(|m| self.wants(m))
                    .map(|m| key(item, *rep, 0, m, None))
                    .collect()
            }
            Job::Relaxed(item, rep, _) => item
                .relaxed_targets()
                .into_iter()
                .map(|(name, _)| key(item, *rep, 0, RELAXED_METRIC, Some(name)))
                .collect(),
        }
    }

    fn run(&self, job: &Job) -> JobOutput {
        match job {
            Job::Ngram(item, g) => self.ngram(item, g),
            Job::Reference(item, rep) if item.is_open_ended() => self.perplexity(item, *rep),
            Job::Reference(item, rep) => self.mcqa(item, *rep),
            Job::Relaxed(item, rep, replay) => self.relaxed(item, *rep, replay.as_ref()),
        }
    }

    fn ngram(&self, item: &QaItem, g: &GenerationRecord) -> JobOutput {
        let refs = item.ngram_references();
        let scores = NgramMetric::ALL
            .iter()
            .filter(|m| self.wants(m.name()))
            .map(|m| {
                let mut r = self.record(item, g.repetition, g.rephrasing, m.name(), None);
                r.value = Some(m.score_multi(&g.text, &refs));
                r
            })
            .collect();
        JobOutput {
            scores,
            ..Default::default()
        }
    }

    fn perplexity(&self, item: &QaItem, rep: usize) -> JobOutput {
        let reference = item.primary_reference().unwrap_or_default();
        let result = self
            .client
            .score_continuation(&open_prompt(&item.question), reference)
            .map_err(|e| e.to_string())
            .and_then(|toks| perplexity_family(&toks, reference).map_err(|e| e.to_string()));
        let scores = PERPLEXITY_METRICS
            .iter()
            .filter(|m| self.wants(m))
            .map(|m| {
                let mut r = self.record(item, rep, 0, m, None);
                match &result {
                    Ok(s) => {
                        let v = match *m {
                            "word_perplexity" => s.word_perplexity,
                            "byte_perplexity" => s.byte_perplexity,
                            _ => s.bits_per_byte,
                        };
                        set_value(&mut r, v);
                    }
                    Err(e) => r.error = Some(e.clone()),
                }
                r
            })
            .collect();
        JobOutput {
            scores,
            ..Default::default()
        }
    }

    fn mcqa(&self, item: &QaItem, rep: usize) -> JobOutput {
        let Payload::Mcqa { options, gold_index } = &item.payload else {
            unreachable!("mcqa job on a non-mcqa item")
        };
        let scores = [("acc", OptionNormalization::None), ("acc_norm", OptionNormalization::PerByte)]
            .into_iter()
            .filter(|(m, _)| self.wants(m))
            .map(|(m, norm)| {
                let mut r = self.record(item, rep, 0, m, None);
                match score_mcqa_item(&self.client, &item.question, options, *gold_index, norm) {
                    Ok(o) => r.value = Some(if o.correct { 1.0 } else { 0.0 }),
                    Err(e) => r.error = Some(e.to_string()),
                }
                r
            })
            .collect();
        JobOutput {
            scores,
            ..Default::default()
        }
    }

    fn relaxed(&self, item: &QaItem, rep: usize, replay: Option<&CandidateRecord>) -> JobOutput {
        let mut params = self.cfg.relaxed_params();
        params.seed = self
            .cfg
            .seed
            .map(|s| derive_seed(s, &["relaxed", &item.id, &rep.to_string()]));
        let question = open_prompt(&item.question);
        let targets = item.relaxed_targets();
        let mut out = JobOutput::default();

        let candidates = match replay {
            Some(c) => Ok(CandidateSet {
                question: question.clone(),
                continuations: c.continuations.clone(),
            }),
            None => candidate_prefixes(&self.client, &question, &params).map_err(|e| e.to_string()),
        };
        let candidates = match candidates {
            Ok(c) => c,
            Err(e) => {
                for (name, _) in targets {
                    let mut r = self.record(item, rep, 0, RELAXED_METRIC, Some(name));
                    r.error = Some(e.clone());
                    out.scores.push(r);
                }
                return out;
            }
        };
        if replay.is_none() {
            out.candidates = Some(CandidateRecord {
                question_id: item.id.clone(),
                repetition: rep,
                continuations: candidates.continuations.clone(),
            });
        }
        for (name, target) in targets {
            let mut r = self.record(item, rep, 0, RELAXED_METRIC, Some(name));
            match relaxed_with_candidates(&self.client, &question, target, &candidates, &params) {
                Ok(res) => {
                    set_value(&mut r, res.relaxed_perplexity);
                    out.relaxed.push(RelaxedRecord {
                        question_id: item.id.clone(),
                        target_id: name.to_string(),
                        repetition: rep,
                        relaxed_cross_entropy: res.relaxed_cross_entropy,
                        relaxed_perplexity: res.relaxed_perplexity,
                        relaxed_logprob_sum: res.relaxed_logprob_sum,
                        offsets: res.offsets(),
                        target_token_len: res.target_token_len,
                        over_unity_terms: res.over_unity_terms,
                        params,
                    });
                }
                Err(e) => r.error = Some(e.to_string()),
            }
            out.scores.push(r);
        }
        out
    }
}

fn set_value(r: &mut ScoreRecord, v: f64) {
    if v.is_finite() {
        r.value = Some(v);
    } else {
        r.error = Some(format!("non-finite value {v}"));
    }
}

/// Compute every applicable metric and merge the rows into `scores.jsonl`.
///
/// `only` narrows the metric set (the `relaxed` subcommand passes just the
/// relaxed metric). Rows already present with a value are kept; failed rows
/// are retried.
pub fn run_metrics(cfg: &RunConfig, only: Option<&BTreeSet<String>>) -> Result<StageSummary, HarnessError> {
    cfg.validate()?;
    let metrics: BTreeSet<String> = match only {
        Some(o) => cfg.effective_metrics().intersection(o).cloned().collect(),
        None => cfg.effective_metrics(),
    };
    if metrics.is_empty() {
        return Err(HarnessError::Config("no metrics selected".into()));
    }
    let items = load_dataset(&cfg.dataset_path, cfg.dataset_format)?;
    let generations: Vec<GenerationRecord> = read_jsonl(&cfg.generations_path())?;
    let wants_ngram = NGRAM_METRICS.iter().any(|m| metrics.contains(*m));
    if wants_ngram && items.iter().any(QaItem::is_open_ended) && generations.is_empty() {
        return Err(HarnessError::InsufficientData(format!(
            "no generations in {}; run gen first",
            cfg.generations_path().display()
        )));
    }

    let ctx = Ctx {
        cfg,
        client: Client::from_config(&cfg.backend)?,
        metrics,
    };

    let mut scores: BTreeMap<ScoreKey, ScoreRecord> = BTreeMap::new();
    for r in read_jsonl::<ScoreRecord>(&cfg.scores_path())? {
        scores.insert(r.key(), r);
    }
    let mut relaxed: BTreeMap<(String, usize, String), RelaxedRecord> = read_jsonl::<RelaxedRecord>(&cfg.relaxed_path())?
        .into_iter()
        .map(|r| ((r.question_id.clone(), r.repetition, r.target_id.clone()), r))
        .collect();
    let mut candidates: BTreeMap<(String, usize), CandidateRecord> = read_jsonl::<CandidateRecord>(&cfg.candidates_path())?
        .into_iter()
        .map(|c| ((c.question_id.clone(), c.repetition), c))
        .collect();

    let by_id: HashMap<&str, &QaItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut jobs: Vec<Job> = Vec::new();
    if wants_ngram {
        for g in &generations {
            match by_id.get(g.item_id.as_str()) {
                Some(item) if item.is_open_ended() => jobs.push(Job::Ngram(item, g)),
                _ => log::warn!("generation for unknown item {:?} ignored", g.item_id),
            }
        }
    }
    for item in &items {
        for rep in 0..cfg.repetitions {
            jobs.push(Job::Reference(item, rep));
            if ctx.wants(RELAXED_METRIC) && item.is_open_ended() {
                jobs.push(Job::Relaxed(item, rep, candidates.get(&(item.id.clone(), rep)).cloned()));
            }
        }
    }
    let total = jobs.len();
    let is_done = |k: &ScoreKey| scores.get(k).is_some_and(|r| r.value.is_some());
    let jobs: Vec<Job> = jobs
        .into_iter()
        .filter(|j| {
            let expected = ctx.expected(j);
            !expected.is_empty() && !expected.iter().all(is_done)
        })
        .collect();
    let mut summary = StageSummary {
        skipped: total - jobs.len(),
        ..Default::default()
    };

    let mut score_out = Appender::open(&cfg.scores_path())?;
    let mut relaxed_out = None;
    let mut cand_out = None;
    if ctx.wants(RELAXED_METRIC) {
        relaxed_out = Some(Appender::open(&cfg.relaxed_path())?);
        cand_out = Some(Appender::open(&cfg.candidates_path())?);
    }
    run_jobs(cfg.workers, &jobs, |j| ctx.run(j), |out: JobOutput| {
        if let (Some(c), Some(w)) = (out.candidates, cand_out.as_mut()) {
            w.append(&c)?;
            candidates.insert((c.question_id.clone(), c.repetition), c);
        }
        for r in out.relaxed {
            relaxed_out.as_mut().expect("relaxed output open").append(&r)?;
            relaxed.insert((r.question_id.clone(), r.repetition, r.target_id.clone()), r);
        }
        for r in out.scores {
            score_out.append(&r)?;
            if let Some(e) = &r.error {
                summary.failures.push(Failure {
                    stage: format!("score:{}", r.metric),
                    item_id: r.item_id.clone(),
                    repetition: r.repetition,
                    rephrasing: r.rephrasing,
                    error: e.clone(),
                });
            }
            summary.written += 1;
            scores.insert(r.key(), r);
        }
        Ok::<_, HarnessError>(())
    })?;
    drop((score_out, relaxed_out, cand_out));

    write_jsonl(&cfg.scores_path(), &scores.into_values().collect::<Vec<_>>())?;
    if ctx.wants(RELAXED_METRIC) {
        write_jsonl(&cfg.relaxed_path(), &relaxed.into_values().collect::<Vec<_>>())?;
        write_jsonl(&cfg.candidates_path(), &candidates.into_values().collect::<Vec<_>>())?;
    }
    for f in &summary.failures {
        log::warn!("{} failed for {} rep {} variant {}: {}", f.stage, f.item_id, f.repetition, f.rephrasing, f.error);
    }
    Ok(summary)
}
