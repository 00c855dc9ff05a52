//! Uniform access to a remote language model.
//!
//! A [`Backend`] knows how to talk to one kind of endpoint. A [`Client`] wraps
//! a backend with request validation, retries, a concurrency limit and the
//! on-disk cache. Metric code only ever goes through a [`Client`].

mod cache;
mod client;
mod http;
mod types;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::Cache;
pub use client::Client;
pub use http::HttpBackend;
pub use types::{FinishReason, SamplingParams, ScoredContinuation, TokenLogprob};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("tokenization mismatch: backend tokens reconstruct {got:?}, expected {expected:?}")]
    TokenizationMismatch { expected: String, got: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl BackendError {
    /// Only transport-level failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// How prompt log-probabilities are obtained from a completions endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// One request with `echo` and prompt logprobs.
    #[default]
    Echo,
    /// One request per continuation token, reading `top_logprobs`.
    /// Slower; for servers that cannot echo prompt logprobs.
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default)]
    pub scoring: ScoringMode,
    /// Base delay for exponential backoff between retries.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}
fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    8
}
fn default_backoff_ms() -> u64 {
    250
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: default_api_key_env(),
            timeout_s: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            cache_path: None,
            scoring: ScoringMode::default(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_in_flight == 0 {
            return Err(BackendError::InvalidRequest(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if !(self.timeout_s > 0.0) {
            return Err(BackendError::InvalidRequest(
                "timeout_s must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A language model endpoint.
///
/// Implementations do not cache, retry or validate; [`Client`] does that.
pub trait Backend: Send + Sync {
    /// Teacher-forced log-probabilities of `continuation` appended to `context`.
    fn score(&self, context: &str, continuation: &str) -> Result<Vec<TokenLogprob>, BackendError>;

    /// Draw `count` independent continuations of `context`.
    fn sample(
        &self,
        context: &str,
        count: usize,
        sampling: &SamplingParams,
    ) -> Result<Vec<ScoredContinuation>, BackendError>;

    /// Single-turn chat completion.
    fn chat(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        sampling: &SamplingParams,
    ) -> Result<String, BackendError>;
}
