//! Sentence-level n-gram overlap metrics: ROUGE-1/2/L and BLEU.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NgramScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl NgramScore {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Lowercases and splits on every maximal run of non-alphanumeric characters.
pub fn normalize_tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

/// Clipped overlap and the candidate n-gram total.
fn clipped_overlap<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (overlap, cand.values().sum())
}

pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> NgramScore {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    if cand_total == 0 || ref_total == 0 {
        return NgramScore::default();
    }
    let (overlap, _) = clipped_overlap(candidate, reference, n);
    NgramScore::from_pr(
        overlap as f64 / cand_total as f64,
        overlap as f64 / ref_total as f64,
    )
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> NgramScore {
    if candidate.is_empty() || reference.is_empty() {
        return NgramScore::default();
    }
    let l = lcs_len(candidate, reference) as f64;
    NgramScore::from_pr(l / candidate.len() as f64, l / reference.len() as f64)
}

const BLEU_MAX_ORDER: usize = 4;

/// Sentence BLEU with uniform weights over the orders the candidate is long
/// enough to have (at most 4). A zero match count at order n is replaced by
/// `1 / (2 * candidate n-gram count)`.
pub fn bleu<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let orders = candidate.len().min(BLEU_MAX_ORDER);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let (matched, total) = clipped_overlap(candidate, reference, n);
        let p = if matched == 0 {
            1.0 / (2.0 * total as f64)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / orders as f64).exp()
}

/// Which n-gram metric to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NgramMetric {
    Rouge1,
    Rouge2,
    RougeL,
    Bleu,
}

impl NgramMetric {
    pub const ALL: [NgramMetric; 4] = [
        NgramMetric::Rouge1,
        NgramMetric::Rouge2,
        NgramMetric::RougeL,
        NgramMetric::Bleu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NgramMetric::Rouge1 => "rouge1",
            NgramMetric::Rouge2 => "rouge2",
            NgramMetric::RougeL => "rougeL",
            NgramMetric::Bleu => "bleu",
        }
    }

    /// Reported value (F1 for ROUGE) on pre-tokenized text.
    pub fn score<S: AsRef<str>>(self, candidate: &[S], reference: &[S]) -> f64 {
        match self {
            NgramMetric::Rouge1 => rouge_n(candidate, reference, 1).f1,
            NgramMetric::Rouge2 => rouge_n(candidate, reference, 2).f1,
            NgramMetric::RougeL => rouge_l(candidate, reference).f1,
            NgramMetric::Bleu => bleu(candidate, reference),
        }
    }

    /// Best score over several references, on raw text.
    pub fn score_multi(self, candidate: &str, references: &[&str]) -> f64 {
        let cand = normalize_tokenize(candidate);
        references
            .iter()
            .map(|r| self.score(&cand, &normalize_tokenize(r)))
            .fold(0.0, f64::max)
    }
}
