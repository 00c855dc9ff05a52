//! Word/byte perplexity, bits per byte, and MCQA accuracy by option
//! log-likelihood.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Client, TokenLogprob};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference text is empty")]
    EmptyReference,
    #[error("token texts reconstruct {got:?}, not the reference {expected:?}")]
    MismatchedTokens { expected: String, got: String },
    #[error("gold index {gold} out of range for {options} options")]
    InvalidGoldIndex { gold: usize, options: usize },
    #[error("need at least two options, got {0}")]
    TooFewOptions(usize),
    #[error("no outcomes to aggregate")]
    EmptyInput,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityScores {
    pub word_perplexity: f64,
    pub byte_perplexity: f64,
    pub bits_per_byte: f64,
    pub logprob_sum: f64,
    pub n_words: usize,
    pub n_bytes: usize,
}

/// Perplexity family of `reference_text` from its teacher-forced tokens.
///
/// Words are whitespace-separated on the raw text; bytes are UTF-8 bytes.
pub fn perplexity_family(
    token_logprobs: &[TokenLogprob],
    reference_text: &str,
) -> Result<PerplexityScores, MetricError> {
    let n_words = reference_text.split_whitespace().count();
    if reference_text.is_empty() || n_words == 0 {
        return Err(MetricError::EmptyReference);
    }
    let got: String = token_logprobs.iter().map(|t| t.token_text.as_str()).collect();
    if got != reference_text {
        return Err(MetricError::MismatchedTokens {
            expected: reference_text.to_string(),
            got,
        });
    }
    let logprob_sum: f64 = token_logprobs.iter().map(|t| t.logprob).sum();
    let n_bytes = reference_text.len();
    // Base-2 throughout so that byte_perplexity == 2^bits_per_byte holds exactly.
    let bits_per_byte = -logprob_sum / (n_bytes as f64 * LN_2);
    let bits_per_word = -logprob_sum / (n_words as f64 * LN_2);
    Ok(PerplexityScores {
        word_perplexity: bits_per_word.exp2(),
        byte_perplexity: bits_per_byte.exp2(),
        bits_per_byte,
        logprob_sum,
        n_words,
        n_bytes,
    })
}

/// Prompt used for multiple-choice scoring. Options are appended after a
/// single space.
pub fn mcqa_context(question: &str) -> String {
    format!("Question:\n{question}\nAnswer:")
}

/// How option log-likelihoods are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionNormalization {
    /// Raw summed logprob.
    #[default]
    None,
    /// Summed logprob divided by the option's UTF-8 byte count.
    PerByte,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqaOutcome {
    pub chosen_index: usize,
    pub option_logprobs: Vec<f64>,
    pub correct: bool,
}

impl McqaOutcome {
    /// Argmax over `option_logprobs`, ties to the lowest index.
    pub fn from_logprobs(option_logprobs: Vec<f64>, gold_index: usize) -> Self {
        let chosen_index = argmax_first(&option_logprobs);
        Self {
            correct: chosen_index == gold_index,
            chosen_index,
            option_logprobs,
        }
    }
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn score_mcqa_item(
    client: &Client,
    question: &str,
    options: &[String],
    gold_index: usize,
    normalization: OptionNormalization,
) -> Result<McqaOutcome, MetricError> {
    if options.len() < 2 {
        return Err(MetricError::TooFewOptions(options.len()));
    }
    if gold_index >= options.len() {
        return Err(MetricError::InvalidGoldIndex {
            gold: gold_index,
            options: options.len(),
        });
    }
    let context = mcqa_context(question);
    let mut logprobs = Vec::with_capacity(options.len());
    for option in options {
        let continuation = format!(" {option}");
        let tokens = client.score_continuation(&context, &continuation)?;
        let sum: f64 = tokens.iter().map(|t| t.logprob).sum();
        logprobs.push(match normalization {
            OptionNormalization::None => sum,
            OptionNormalization::PerByte => sum / continuation.len() as f64,
        });
    }
    Ok(McqaOutcome::from_logprobs(logprobs, gold_index))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Mean accuracy with binomial standard error `sqrt(acc (1 - acc) / N)`.
pub fn mcqa_accuracy(outcomes: &[McqaOutcome]) -> Result<Accuracy, MetricError> {
    accuracy_from_flags(outcomes.iter().map(|o| o.correct))
}

pub fn accuracy_from_flags(flags: impl IntoIterator<Item = bool>) -> Result<Accuracy, MetricError> {
    let (mut hits, mut n) = (0usize, 0usize);
    for f in flags {
        hits += f as usize;
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::EmptyInput);
    }
    let accuracy = hits as f64 / n as f64;
    Ok(Accuracy {
        accuracy,
        stderr: (accuracy * (1.0 - accuracy) / n as f64).sqrt(),
        n,
    })
}
