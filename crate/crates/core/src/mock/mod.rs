//! Deterministic toy backends.
//!
//! These stand in for a real model in tests and in the local mock server:
//! a character-level bigram language model whose sequence probabilities can
//! be enumerated exactly, a constant-logprob backend, and a noise wrapper.

mod server;

use std::sync::Mutex;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backend::{
    Backend, BackendError, FinishReason, SamplingParams, ScoredContinuation, TokenLogprob,
};

pub use server::{MockServer, MockServerConfig};

/// How a toy backend answers chat requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChatMode {
    /// Return the user prompt unchanged.
    #[default]
    Echo,
    /// Drop, duplicate and swap words, deterministically per (seed, prompt).
    Perturb,
}

impl std::str::FromStr for ChatMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "echo" => Ok(ChatMode::Echo),
            "perturb" => Ok(ChatMode::Perturb),
            other => Err(format!("unknown chat mode {other:?}")),
        }
    }
}

/// Stable 64-bit seed derived from arbitrary text.
pub fn seed_from_text(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub(crate) fn chat_reply(mode: ChatMode, user_prompt: &str, seed: Option<u64>) -> String {
    match mode {
        ChatMode::Echo => user_prompt.to_string(),
        ChatMode::Perturb => perturb_words(user_prompt, seed.unwrap_or(0)),
    }
}

fn perturb_words(text: &str, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ seed_from_text(text));
    let mut words: Vec<&str> = Vec::new();
    for w in text.split_whitespace() {
        let roll: f64 = rng.gen();
        if roll < 0.2 {
            continue;
        }
        words.push(w);
        if roll > 0.9 {
            words.push(w);
        }
    }
    if words.len() >= 2 {
        let i = rng.gen_range(0..words.len() - 1);
        words.swap(i, i + 1);
    }
    if words.is_empty() {
        return text.to_string();
    }
    words.join(" ")
}

/// Character-level bigram language model.
///
/// Every symbol is one token. The distribution of the next token depends only
/// on the previous character: its transition row if it is a known symbol,
/// otherwise the start row. Each row has one extra trailing entry for
/// end-of-sequence.
#[derive(Debug)]
pub struct BigramLm {
    symbols: Vec<char>,
    start: Vec<f64>,
    rows: Vec<Vec<f64>>,
    oov_logprob: Option<f64>,
    exhaustive: bool,
    chat: ChatMode,
    rng: Mutex<ChaCha8Rng>,
}

impl BigramLm {
    /// `start` and each row of `transitions` have `symbols.len() + 1`
    /// entries (the last is end-of-sequence) and must sum to one.
    pub fn new(symbols: Vec<char>, start: Vec<f64>, transitions: Vec<Vec<f64>>) -> Self {
        let k = symbols.len() + 1;
        assert!(!symbols.is_empty(), "need at least one symbol");
        assert_eq!(start.len(), k, "start row has wrong width");
        assert_eq!(transitions.len(), symbols.len(), "one row per symbol");
        for row in std::iter::once(&start).chain(&transitions) {
            assert_eq!(row.len(), k, "transition row has wrong width");
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "row sums to {total}");
            assert!(row.iter().all(|p| *p >= 0.0));
        }
        Self {
            symbols,
            start,
            rows: transitions,
            oov_logprob: None,
            exhaustive: false,
            chat: ChatMode::Echo,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    /// Random strictly positive bigram model over `symbols`, with
    /// end-of-sequence mass `eos` in every row.
    pub fn random(symbols: &str, eos: f64, seed: u64) -> Self {
        let symbols: Vec<char> = symbols.chars().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..symbols.len())
                .map(|_| {
                    let u: f64 = rng.gen_range(0.05..1.0);
                    u * u * u
                })
                .collect();
            let total: f64 = raw.iter().sum();
            let mut r: Vec<f64> = raw.iter().map(|x| x / total * (1.0 - eos)).collect();
            r.push(eos);
            r
        };
        let start = row(&mut rng);
        let transitions = (0..symbols.len()).map(|_| row(&mut rng)).collect();
        let mut lm = Self::new(symbols, start, transitions);
        lm.rng = Mutex::new(ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
        lm
    }

    /// Toy model for free text: lowercase letters, space and a few
    /// punctuation marks; anything else scores at a fixed penalty.
    pub fn text_model(name: &str) -> Self {
        Self::random("abcdefghijklmnopqrstuvwxyz .,", 0.01, seed_from_text(name))
            .with_oov_logprob((0.01f64).ln())
    }

    /// Log-probability charged to characters outside the symbol set; without
    /// it, scoring such characters is an error.
    pub fn with_oov_logprob(mut self, logprob: f64) -> Self {
        self.oov_logprob = Some(logprob);
        self
    }

    /// Make `sample` return the `count` most probable sequences (by joint
    /// token log-probability) instead of random draws.
    pub fn exhaustive(mut self) -> Self {
        self.exhaustive = true;
        self
    }

    pub fn with_chat_mode(mut self, chat: ChatMode) -> Self {
        self.chat = chat;
        self
    }

    pub fn with_rng_seed(self, seed: u64) -> Self {
        *self.rng.lock().unwrap() = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    fn symbol_index(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    /// Next-token distribution after `prev` (`None` = start of text).
    pub fn row_after(&self, prev: Option<char>) -> &[f64] {
        match prev.and_then(|c| self.symbol_index(c)) {
            Some(i) => &self.rows[i],
            None => &self.start,
        }
    }

    /// Log-probability of `c` following `prev`.
    pub fn token_logprob(&self, prev: Option<char>, c: char) -> Result<f64, BackendError> {
        match self.symbol_index(c) {
            Some(i) => Ok(self.row_after(prev)[i].ln()),
            None => self.oov_logprob.ok_or_else(|| {
                BackendError::TokenizationMismatch {
                    expected: c.to_string(),
                    got: "character outside the model vocabulary".into(),
                }
            }),
        }
    }

    /// Top-`k` (token, logprob) pairs after `prev`, end-of-sequence excluded.
    pub fn top_tokens(&self, prev: Option<char>, k: usize) -> Vec<(String, f64)> {
        let row = self.row_after(prev);
        let mut pairs: Vec<(String, f64)> = self
            .symbols
            .iter()
            .zip(row)
            .map(|(c, p)| (c.to_string(), p.ln()))
            .collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        pairs.truncate(k);
        pairs
    }

    /// Per-character scoring of `text` following `context`.
    pub fn score_text(&self, context: &str, text: &str) -> Result<Vec<TokenLogprob>, BackendError> {
        let mut prev = context.chars().last();
        text.chars()
            .map(|c| {
                let lp = self.token_logprob(prev, c)?;
                prev = Some(c);
                TokenLogprob::new(c.to_string(), lp)
            })
            .collect()
    }

    /// One random continuation. Reported logprobs are the model's, before
    /// temperature and nucleus filtering.
    pub fn sample_one(
        &self,
        context: &str,
        sampling: &SamplingParams,
        rng: &mut impl Rng,
    ) -> ScoredContinuation {
        let mut prev = context.chars().last();
        let mut tokens = Vec::new();
        let eos = self.symbols.len();
        let finish = loop {
            if tokens.len() >= sampling.max_tokens {
                break FinishReason::Length;
            }
            let row = self.row_after(prev);
            let idx = pick(row, sampling, rng);
            if idx == eos {
                break FinishReason::Stop;
            }
            let c = self.symbols[idx];
            tokens.push(TokenLogprob::new(c.to_string(), row[idx].ln()).unwrap());
            prev = Some(c);
        };
        ScoredContinuation::new(tokens, finish)
    }

    /// Every continuation of length ≤ `max_tokens`, in no particular order.
    pub fn enumerate(&self, context: &str, max_tokens: usize) -> Vec<ScoredContinuation> {
        let mut out = Vec::new();
        let mut stack: Vec<Vec<TokenLogprob>> = vec![Vec::new()];
        let start = context.chars().last();
        while let Some(tokens) = stack.pop() {
            if tokens.len() == max_tokens {
                out.push(ScoredContinuation::new(tokens, FinishReason::Length));
                continue;
            }
            let prev = tokens
                .last()
                .and_then(|t| t.token_text.chars().next())
                .or(start);
            let row = self.row_after(prev);
            for (i, &c) in self.symbols.iter().enumerate() {
                let mut next = tokens.clone();
                next.push(TokenLogprob::new(c.to_string(), row[i].ln()).unwrap());
                stack.push(next);
            }
            out.push(ScoredContinuation::new(tokens, FinishReason::Stop));
        }
        out
    }
}

fn pick(row: &[f64], sampling: &SamplingParams, rng: &mut impl Rng) -> usize {
    if sampling.temperature == 0.0 {
        return row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
    }
    let mut weights: Vec<f64> = row
        .iter()
        .map(|p| if *p > 0.0 { p.powf(1.0 / sampling.temperature) } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    if sampling.top_p < 1.0 {
        let mut order: Vec<usize> = (0..weights.len()).collect();
        order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then_with(|| a.cmp(&b)));
        let mut cum = 0.0;
        let mut keep = vec![false; weights.len()];
        for &i in &order {
            keep[i] = true;
            cum += weights[i];
            if cum >= sampling.top_p {
                break;
            }
        }
        for (w, k) in weights.iter_mut().zip(keep) {
            if !k {
                *w = 0.0;
            }
        }
    }
    WeightedIndex::new(&weights).unwrap().sample(rng)
}

impl Backend for BigramLm {
    fn score(&self, context: &str, continuation: &str) -> Result<Vec<TokenLogprob>, BackendError> {
        self.score_text(context, continuation)
    }

    fn sample(
        &self,
        context: &str,
        count: usize,
        sampling: &SamplingParams,
    ) -> Result<Vec<ScoredContinuation>, BackendError> {
        if self.exhaustive {
            let mut all = self.enumerate(context, sampling.max_tokens);
            all.sort_by(|a, b| {
                b.joint_logprob
                    .total_cmp(&a.joint_logprob)
                    .then_with(|| a.text().cmp(&b.text()))
            });
            all.truncate(count);
            // Pad with the best sequence so the backend honours `count`.
            while all.len() < count {
                all.push(all[0].clone());
            }
            return Ok(all);
        }
        let draw = |rng: &mut ChaCha8Rng| {
            (0..count)
                .map(|_| self.sample_one(context, sampling, rng))
                .collect()
        };
        Ok(match sampling.seed {
            Some(seed) => draw(&mut ChaCha8Rng::seed_from_u64(seed)),
            None => draw(&mut self.rng.lock().unwrap()),
        })
    }

    fn chat(
        &self,
        _system_prompt: &str,
        user_prompt: &str,
        sampling: &SamplingParams,
    ) -> Result<String, BackendError> {
        Ok(chat_reply(self.chat, user_prompt, sampling.seed))
    }
}

/// Assigns the same log-probability to every token.
///
/// Text is tokenized into chunks of `chars_per_token` characters. Sampling
/// returns a fixed reply, truncated to `max_tokens` tokens, whatever the
/// sampling parameters. Chat echoes the user prompt.
#[derive(Debug, Clone)]
pub struct ConstantBackend {
    pub logprob: f64,
    pub chars_per_token: usize,
    pub reply: String,
}

impl ConstantBackend {
    pub fn new(logprob: f64) -> Self {
        Self {
            logprob,
            chars_per_token: 1,
            reply: "the answer is unclear".to_string(),
        }
    }

    pub fn with_chars_per_token(mut self, n: usize) -> Self {
        assert!(n >= 1);
        self.chars_per_token = n;
        self
    }

    pub fn with_reply(mut self, reply: impl Into<String>) -> Self {
        self.reply = reply.into();
        self
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        chars
            .chunks(self.chars_per_token)
            .map(|c| c.iter().collect())
            .collect()
    }
}

impl Backend for ConstantBackend {
    fn score(&self, _context: &str, continuation: &str) -> Result<Vec<TokenLogprob>, BackendError> {
        self.tokenize(continuation)
            .into_iter()
            .map(|t| TokenLogprob::new(t, self.logprob))
            .collect()
    }

    fn sample(
        &self,
        _context: &str,
        count: usize,
        sampling: &SamplingParams,
    ) -> Result<Vec<ScoredContinuation>, BackendError> {
        let pieces = self.tokenize(&self.reply);
        let finish = if pieces.len() > sampling.max_tokens {
            FinishReason::Length
        } else {
            FinishReason::Stop
        };
        let tokens = pieces
            .into_iter()
            .take(sampling.max_tokens)
            .map(|t| TokenLogprob::new(t, self.logprob))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(vec![ScoredContinuation::new(tokens, finish); count])
    }

    fn chat(
        &self,
        _system_prompt: &str,
        user_prompt: &str,
        _sampling: &SamplingParams,
    ) -> Result<String, BackendError> {
        Ok(user_prompt.to_string())
    }
}

/// Wraps a backend and subtracts uniform noise in `[0, scale)` from every
/// scored logprob, so repeated scoring of the same text disagrees.
pub struct NoisyBackend<B> {
    inner: B,
    scale: f64,
    rng: Mutex<ChaCha8Rng>,
}

impl<B: Backend> NoisyBackend<B> {
    pub fn new(inner: B, scale: f64, seed: u64) -> Self {
        Self {
            inner,
            scale,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl<B: Backend> Backend for NoisyBackend<B> {
    fn score(&self, context: &str, continuation: &str) -> Result<Vec<TokenLogprob>, BackendError> {
        let mut tokens = self.inner.score(context, continuation)?;
        let mut rng = self.rng.lock().unwrap();
        for t in &mut tokens {
            t.logprob -= rng.gen_range(0.0..self.scale);
        }
        Ok(tokens)
    }

    fn sample(
        &self,
        context: &str,
        count: usize,
        sampling: &SamplingParams,
    ) -> Result<Vec<ScoredContinuation>, BackendError> {
        self.inner.sample(context, count, sampling)
    }

    fn chat(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        sampling: &SamplingParams,
    ) -> Result<String, BackendError> {
        self.inner.chat(system_prompt, user_prompt, sampling)
    }
}
