//! Relaxed perplexity.
//!
//! Scores how likely a model is to produce `target` *somewhere* in the first
//! `max_tokens` tokens of its answer to `question`, instead of immediately.
//! For each evaluated offset `i` (0, stride, 2·stride, … ≤ max_tokens) the
//! probability that the target follows an `i`-token model-generated prefix
//! is approximated from the `ell` most likely sampled continuations:
//!
//! ```text
//! P(A_i | B_i) ≈ Σ_{distinct i-token prefixes p} P(target | question + p)
//! ```
//!
//! Prefixes are deduplicated per offset because the sum is over mutually
//! exclusive events. Sequence-probability weights `P(p)` are dropped by
//! default so that long prefixes are not penalized for their length; the
//! weighted form is available as [`Weighting::SequenceWeighted`].
//!
//! ```text
//! relaxed cross-entropy = −Σ_i log P(A_i | B_i)
//! relaxed perplexity    = exp(cross-entropy / (max_offset + target tokens))
//! ```

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Client, SamplingParams, ScoredContinuation};

#[derive(Debug, Error)]
pub enum RelaxedError {
    #[error("target is empty")]
    EmptyTarget,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("every sampled continuation was empty")]
    InsufficientCandidates,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// How per-prefix probabilities are combined at one offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Σ P(target | question + p): length-skewed, the default.
    #[default]
    Skewed,
    /// Σ P(target | question + p) · P(p | question).
    SequenceWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxedParams {
    /// Continuations kept as prefix sources.
    pub ell: usize,
    /// Continuations sampled.
    pub search_space: usize,
    pub stride: usize,
    /// Largest prefix offset, in tokens.
    pub max_tokens: usize,
    pub top_p: f64,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub weighting: Weighting,
}

impl Default for RelaxedParams {
    fn default() -> Self {
        Self {
            ell: 5,
            search_space: 10,
            stride: 8,
            max_tokens: 128,
            top_p: 0.9,
            temperature: 1.0,
            seed: None,
            weighting: Weighting::Skewed,
        }
    }
}

impl RelaxedParams {
    pub fn validate(&self) -> Result<(), RelaxedError> {
        if self.ell < 1 || self.ell > self.search_space {
            return Err(RelaxedError::InvalidParams(format!(
                "need 1 <= ell <= search_space, got ell={} search_space={}",
                self.ell, self.search_space
            )));
        }
        if self.stride < 1 {
            return Err(RelaxedError::InvalidParams("stride must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(RelaxedError::InvalidParams(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }

    /// Offsets 0, stride, 2·stride, … up to `max_tokens`.
    pub fn offsets(&self) -> impl Iterator<Item = usize> {
        (0..=self.max_tokens).step_by(self.stride.max(1))
    }

    fn sampling(&self) -> SamplingParams {
        SamplingParams {
            top_p: self.top_p,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: self.seed,
        }
    }
}

/// The kept continuations for one question, most likely first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub question: String,
    pub continuations: Vec<ScoredContinuation>,
}

/// One distinct prefix at a given offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Prefix {
    pub text: String,
    /// Joint log-probability of the prefix tokens given the question.
    pub logprob: f64,
}

impl CandidateSet {
    /// Collapse identical continuations, sort by descending joint
    /// log-probability and keep the best `ell`.
    pub fn from_samples(question: &str, samples: Vec<ScoredContinuation>, ell: usize) -> Self {
        let mut seen = HashSet::new();
        let mut unique: Vec<ScoredContinuation> = samples
            .into_iter()
            .filter(|s| seen.insert(s.tokens.iter().map(|t| t.token_text.clone()).collect::<Vec<_>>()))
            .collect();
        unique.sort_by(|a, b| b.joint_logprob.total_cmp(&a.joint_logprob));
        unique.truncate(ell);
        Self {
            question: question.to_string(),
            continuations: unique,
        }
    }

    /// Distinct `offset`-token prefixes, in candidate order. Offset 0 always
    /// yields the single empty prefix; continuations shorter than `offset`
    /// contribute nothing.
    pub fn distinct_prefixes(&self, offset: usize) -> Vec<Prefix> {
        if offset == 0 {
            return vec![Prefix {
                text: String::new(),
                logprob: 0.0,
            }];
        }
        let mut seen = HashSet::new();
        self.continuations
            .iter()
            .filter_map(|c| {
                let text = c.prefix_text(offset)?;
                seen.insert(text.clone()).then(|| Prefix {
                    text,
                    logprob: c.prefix_logprob(offset),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedTerm {
    pub offset: usize,
    /// log P(A_i | B_i).
    pub log_p_a_given_b: f64,
    pub n_distinct_prefixes: usize,
    /// The unweighted sum went above probability one.
    #[serde(default)]
    pub exceeds_one: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedResult {
    pub terms: Vec<RelaxedTerm>,
    pub relaxed_cross_entropy: f64,
    pub relaxed_perplexity: f64,
    pub relaxed_logprob_sum: f64,
    pub target_token_len: usize,
    /// Largest offset that produced a term.
    pub max_offset: usize,
    /// Number of terms with `exceeds_one` set.
    pub over_unity_terms: usize,
}

impl RelaxedResult {
    pub fn offsets(&self) -> Vec<usize> {
        self.terms.iter().map(|t| t.offset).collect()
    }
}

/// Numerically stable `ln Σ exp(v)`; `-inf` for an empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Sample `search_space` continuations and keep the `ell` most likely.
pub fn candidate_prefixes(
    client: &Client,
    question: &str,
    params: &RelaxedParams,
) -> Result<CandidateSet, RelaxedError> {
    params.validate()?;
    if params.max_tokens == 0 {
        // Only offset 0 is evaluated; no prefix source is needed.
        return Ok(CandidateSet {
            question: question.to_string(),
            continuations: Vec::new(),
        });
    }
    let samples = client.sample_continuations(question, params.search_space, &params.sampling())?;
    if samples.iter().all(|s| s.tokens.is_empty()) {
        return Err(RelaxedError::InsufficientCandidates);
    }
    Ok(CandidateSet::from_samples(question, samples, params.ell))
}

struct Scored {
    log_p: f64,
    token_len: usize,
}

fn score_prefix(client: &Client, question: &str, prefix: &str, target: &str) -> Result<Scored, BackendError> {
    let context = format!("{question}{prefix}");
    let tokens = client.score_continuation(&context, target)?;
    Ok(Scored {
        log_p: tokens.iter().map(|t| t.logprob).sum(),
        token_len: tokens.len(),
    })
}

fn combine(offset: usize, prefixes: &[Prefix], scores: &[f64], weighting: Weighting) -> RelaxedTerm {
    let unweighted = logsumexp(scores);
    let log_p_a_given_b = match weighting {
        Weighting::Skewed => unweighted,
        Weighting::SequenceWeighted => {
            let weighted: Vec<f64> = prefixes
                .iter()
                .zip(scores)
                .map(|(p, s)| s + p.logprob)
                .collect();
            logsumexp(&weighted)
        }
    };
    RelaxedTerm {
        offset,
        log_p_a_given_b,
        n_distinct_prefixes: prefixes.len(),
        exceeds_one: unweighted > 0.0,
    }
}

/// The term for one offset, or `None` when no candidate reaches it.
pub fn term_at_offset(
    client: &Client,
    question: &str,
    target: &str,
    candidates: &CandidateSet,
    offset: usize,
    weighting: Weighting,
) -> Result<Option<RelaxedTerm>, RelaxedError> {
    if target.is_empty() {
        return Err(RelaxedError::EmptyTarget);
    }
    let prefixes = candidates.distinct_prefixes(offset);
    if prefixes.is_empty() {
        return Ok(None);
    }
    let scores = prefixes
        .par_iter()
        .map(|p| score_prefix(client, question, &p.text, target).map(|s| s.log_p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(combine(offset, &prefixes, &scores, weighting)))
}

/// Relaxed perplexity of `target` against an already sampled candidate set.
pub fn relaxed_with_candidates(
    client: &Client,
    question: &str,
    target: &str,
    candidates: &CandidateSet,
    params: &RelaxedParams,
) -> Result<RelaxedResult, RelaxedError> {
    params.validate()?;
    if target.is_empty() {
        return Err(RelaxedError::EmptyTarget);
    }
    let jobs: Vec<(usize, Vec<Prefix>)> = params
        .offsets()
        .map(|o| (o, candidates.distinct_prefixes(o)))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    let flat: Vec<(usize, &Prefix)> = jobs
        .iter()
        .enumerate()
        .flat_map(|(j, (_, ps))| ps.iter().map(move |p| (j, p)))
        .collect();
    // Concurrent scoring; the reduction below runs in a fixed order.
    let scored = flat
        .par_iter()
        .map(|(_, p)| score_prefix(client, question, &p.text, target))
        .collect::<Result<Vec<_>, _>>()?;

    let target_token_len = scored[0].token_len;
    let mut terms = Vec::with_capacity(jobs.len());
    let mut cursor = 0;
    for (offset, prefixes) in &jobs {
        let scores: Vec<f64> = scored[cursor..cursor + prefixes.len()]
            .iter()
            .map(|s| s.log_p)
            .collect();
        cursor += prefixes.len();
        terms.push(combine(*offset, prefixes, &scores, params.weighting));
    }
    Ok(assemble(terms, target_token_len))
}

fn assemble(terms: Vec<RelaxedTerm>, target_token_len: usize) -> RelaxedResult {
    let relaxed_logprob_sum: f64 = terms.iter().map(|t| t.log_p_a_given_b).sum();
    let relaxed_cross_entropy = -relaxed_logprob_sum;
    let max_offset = terms.last().map_or(0, |t| t.offset);
    let relaxed_perplexity =
        (relaxed_cross_entropy / (max_offset + target_token_len) as f64).exp();
    RelaxedResult {
        over_unity_terms: terms.iter().filter(|t| t.exceeds_one).count(),
        terms,
        relaxed_cross_entropy,
        relaxed_perplexity,
        relaxed_logprob_sum,
        target_token_len,
        max_offset,
    }
}

/// Sample candidates for `question` and score `target` against them.
pub fn relaxed_perplexity(
    client: &Client,
    question: &str,
    target: &str,
    params: &RelaxedParams,
) -> Result<RelaxedResult, RelaxedError> {
    if target.is_empty() {
        return Err(RelaxedError::EmptyTarget);
    }
    let candidates = candidate_prefixes(client, question, params)?;
    relaxed_with_candidates(client, question, target, &candidates, params)
}

/// Score several targets against one shared candidate set.
pub fn relaxed_for_targets(
    client: &Client,
    question: &str,
    targets: &[&str],
    params: &RelaxedParams,
) -> Result<(CandidateSet, Vec<RelaxedResult>), RelaxedError> {
    if targets.is_empty() {
        return Err(RelaxedError::InvalidParams("no targets given".into()));
    }
    if targets.iter().any(|t| t.is_empty()) {
        return Err(RelaxedError::EmptyTarget);
    }
    let candidates = candidate_prefixes(client, question, params)?;
    let results = targets
        .iter()
        .map(|t| relaxed_with_candidates(client, question, t, &candidates, params))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((candidates, results))
}
