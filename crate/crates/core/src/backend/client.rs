use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::Serialize;

use super::{
    Backend, BackendConfig, BackendError, Cache, HttpBackend, SamplingParams, ScoredContinuation,
    TokenLogprob,
};

/// Counting semaphore bounding outstanding backend requests.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap();
        *n -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CacheKey<'a> {
    Score {
        model: &'a str,
        context: &'a str,
        continuation: &'a str,
    },
    Sample {
        model: &'a str,
        context: &'a str,
        count: usize,
        sampling: &'a SamplingParams,
    },
    Chat {
        model: &'a str,
        system: &'a str,
        user: &'a str,
        sampling: &'a SamplingParams,
    },
}

/// Validating, caching, rate-limited front end to a [`Backend`].
pub struct Client {
    backend: Arc<dyn Backend>,
    model_name: String,
    cache: Option<Cache>,
    limiter: Limiter,
    max_retries: u32,
    backoff: Duration,
    requests: AtomicU64,
}

impl Client {
    /// Client for an OpenAI-style HTTP endpoint.
    pub fn from_config(config: &BackendConfig) -> Result<Self, BackendError> {
        let backend = HttpBackend::new(config)?;
        Self::with_backend(Arc::new(backend), config)
    }

    /// Client for an arbitrary backend, using the limits and cache in `config`.
    pub fn with_backend(
        backend: Arc<dyn Backend>,
        config: &BackendConfig,
    ) -> Result<Self, BackendError> {
        config.validate()?;
        let cache = config.cache_path.as_ref().map(Cache::open).transpose()?;
        Ok(Self {
            backend,
            model_name: config.model_name.clone(),
            cache,
            limiter: Limiter::new(config.max_in_flight),
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.backoff_ms),
            requests: AtomicU64::new(0),
        })
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    /// Number of requests that reached the backend (cache hits excluded,
    /// retries included).
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    fn call<T>(&self, f: impl Fn(&dyn Backend) -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.requests.fetch_add(1, Ordering::SeqCst);
                f(self.backend.as_ref())
            };
            match result {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let jitter: f64 = rand::thread_rng().gen_range(0.5..1.5);
                    let delay = self.backoff.mul_f64(2f64.powi(attempt as i32) * jitter);
                    log::debug!("retrying after {delay:?}: {e}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Per-token log-probabilities of `continuation` given `context`.
    ///
    /// The returned tokens concatenate to `continuation` byte-for-byte.
    pub fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        if continuation.is_empty() {
            return Err(BackendError::InvalidRequest(
                "continuation must be non-empty".into(),
            ));
        }
        let key = CacheKey::Score {
            model: &self.model_name,
            context,
            continuation,
        };
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        let tokens = self.call(|b| b.score(context, continuation))?;
        check_tokens(&tokens)?;
        let got: String = tokens.iter().map(|t| t.token_text.as_str()).collect();
        if got != continuation {
            return Err(BackendError::TokenizationMismatch {
                expected: continuation.to_string(),
                got,
            });
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, &tokens)?;
        }
        Ok(tokens)
    }

    /// `count` sampled continuations, sorted by descending joint log-probability.
    ///
    /// Results are only cached when `sampling.seed` is set; unseeded draws
    /// must stay independent.
    pub fn sample_continuations(
        &self,
        context: &str,
        count: usize,
        sampling: &SamplingParams,
    ) -> Result<Vec<ScoredContinuation>, BackendError> {
        if count == 0 {
            return Err(BackendError::InvalidRequest("count must be at least 1".into()));
        }
        sampling.validate()?;
        let key = CacheKey::Sample {
            model: &self.model_name,
            context,
            count,
            sampling,
        };
        let cache = self.cache.as_ref().filter(|_| sampling.seed.is_some());
        if let Some(hit) = cache.and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        let mut samples = self.call(|b| b.sample(context, count, sampling))?;
        if samples.len() != count {
            return Err(BackendError::Protocol(format!(
                "asked for {count} continuations, backend returned {}",
                samples.len()
            )));
        }
        for s in &mut samples {
            check_tokens(&s.tokens)?;
            if s.tokens.len() > sampling.max_tokens {
                return Err(BackendError::Protocol(format!(
                    "continuation has {} tokens, max_tokens is {}",
                    s.tokens.len(),
                    sampling.max_tokens
                )));
            }
            s.joint_logprob = s.tokens.iter().map(|t| t.logprob).sum();
        }
        samples.sort_by(|a, b| b.joint_logprob.total_cmp(&a.joint_logprob));
        if let Some(cache) = cache {
            cache.put(&key, &samples)?;
        }
        Ok(samples)
    }

    /// Assistant reply to a single system + user turn.
    pub fn chat_generate(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        sampling: &SamplingParams,
    ) -> Result<String, BackendError> {
        if user_prompt.is_empty() {
            return Err(BackendError::InvalidRequest(
                "user prompt must be non-empty".into(),
            ));
        }
        sampling.validate()?;
        let key = CacheKey::Chat {
            model: &self.model_name,
            system: system_prompt,
            user: user_prompt,
            sampling,
        };
        let cache = self.cache.as_ref().filter(|_| sampling.seed.is_some());
        if let Some(hit) = cache.and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        let text = self.call(|b| b.chat(system_prompt, user_prompt, sampling))?;
        if let Some(cache) = cache {
            cache.put(&key, &text)?;
        }
        Ok(text)
    }
}

fn check_tokens(tokens: &[TokenLogprob]) -> Result<(), BackendError> {
    for t in tokens {
        if !t.logprob.is_finite() {
            return Err(BackendError::Protocol(format!(
                "non-finite logprob for token {:?}",
                t.token_text
            )));
        }
        if t.byte_len != t.token_text.len() {
            return Err(BackendError::Protocol(format!(
                "token {:?} reports byte_len {}",
                t.token_text, t.byte_len
            )));
        }
    }
    Ok(())
}
