use serde::{Deserialize, Serialize};

use super::BackendError;

/// One scored token as returned by a model backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token_text: String,
    /// Natural-log probability of the token given everything before it.
    pub logprob: f64,
    pub byte_len: usize,
}

impl TokenLogprob {
    /// Builds a record, rejecting non-finite log-probabilities.
    pub fn new(token_text: impl Into<String>, logprob: f64) -> Result<Self, BackendError> {
        let token_text = token_text.into();
        if !logprob.is_finite() {
            return Err(BackendError::Protocol(format!(
                "non-finite logprob {logprob} for token {token_text:?}"
            )));
        }
        let byte_len = token_text.len();
        Ok(Self {
            token_text,
            logprob,
            byte_len,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Length,
    Stop,
    Other,
}

impl FinishReason {
    pub fn from_wire(reason: Option<&str>) -> Self {
        match reason {
            Some("length") => FinishReason::Length,
            Some("stop") | Some("eos") => FinishReason::Stop,
            _ => FinishReason::Other,
        }
    }
}

/// A sampled continuation together with its per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredContinuation {
    pub tokens: Vec<TokenLogprob>,
    pub joint_logprob: f64,
    pub finish_reason: FinishReason,
}

impl ScoredContinuation {
    pub fn new(tokens: Vec<TokenLogprob>, finish_reason: FinishReason) -> Self {
        let joint_logprob = tokens.iter().map(|t| t.logprob).sum();
        Self {
            tokens,
            joint_logprob,
            finish_reason,
        }
    }

    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.token_text.as_str()).collect()
    }

    /// Concatenated text of the first `n` tokens, or `None` if the
    /// continuation is shorter than `n`.
    pub fn prefix_text(&self, n: usize) -> Option<String> {
        if self.tokens.len() < n {
            return None;
        }
        Some(self.tokens[..n].iter().map(|t| t.token_text.as_str()).collect())
    }

    /// Joint log-probability of the first `n` tokens.
    pub fn prefix_logprob(&self, n: usize) -> f64 {
        self.tokens.iter().take(n).map(|t| t.logprob).sum()
    }
}

/// Sampling parameters forwarded to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            top_p: 0.9,
            temperature: 1.0,
            max_tokens: 256,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub(crate) fn validate(&self) -> Result<(), BackendError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}
