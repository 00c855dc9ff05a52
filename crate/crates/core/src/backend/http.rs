//! OpenAI-style completions client.
//!
//! Scoring sends `context + continuation` with `echo` and `logprobs` so the
//! server returns the prompt log-probabilities; the continuation's tokens are
//! located through `text_offset`. Servers that cannot echo prompt logprobs can
//! be scored incrementally, one request per token, from `top_logprobs`.

use std::collections::HashMap;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    Backend, BackendConfig, BackendError, FinishReason, SamplingParams, ScoredContinuation,
    ScoringMode, TokenLogprob,
};

const INCREMENTAL_TOP_LOGPROBS: usize = 20;

pub struct HttpBackend {
    http: reqwest::blocking::Client,
    base_url: String,
    model: String,
    api_key: Option<String>,
    scoring: ScoringMode,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Debug, Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<HashMap<String, f64>>>>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| BackendError::Transport(format!("building HTTP client: {e}")))?;
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        Ok(Self {
            http,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            model: config.model_name.clone(),
            api_key,
            scoring: config.scoring,
        })
    }

    fn post<T: for<'de> Deserialize<'de>>(&self, path: &str, body: &Value) -> Result<T, BackendError> {
        let url = format!("{}{}", self.base_url, path);
        let mut req = self.http.post(&url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Transport(format!("POST {url}: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::Transport(format!("reading body from {url}: {e}")))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport(format!("{url} returned {status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("{url} returned {status}: {text}")));
        }
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Protocol(format!("malformed response from {url}: {e}")))
    }

    fn complete(&self, body: Value) -> Result<CompletionResponse, BackendError> {
        let resp: CompletionResponse = self.post("/v1/completions", &body)?;
        if resp.choices.is_empty() {
            return Err(BackendError::Protocol("completion returned no choices".into()));
        }
        Ok(resp)
    }

    fn score_echo(&self, context: &str, continuation: &str) -> Result<Vec<TokenLogprob>, BackendError> {
        let prompt = format!("{context}{continuation}");
        let resp = self.complete(json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": 1,
            "echo": true,
        }))?;
        let lp = resp.choices[0]
            .logprobs
            .as_ref()
            .ok_or_else(|| BackendError::Protocol("echo response carries no logprobs".into()))?;
        extract_continuation(lp, context, continuation)
    }

    fn score_incremental(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<Vec<TokenLogprob>, BackendError> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < continuation.len() {
            let rest = &continuation[pos..];
            let resp = self.complete(json!({
                "model": self.model,
                "prompt": format!("{context}{}", &continuation[..pos]),
                "max_tokens": 1,
                "temperature": 0.0,
                "logprobs": INCREMENTAL_TOP_LOGPROBS,
            }))?;
            let top = resp.choices[0]
                .logprobs
                .as_ref()
                .and_then(|lp| lp.top_logprobs.as_ref())
                .and_then(|t| t.first().cloned().flatten())
                .ok_or_else(|| BackendError::Protocol("response carries no top_logprobs".into()))?;
            // Longest candidate token that continues the target text.
            let (token, logprob) = top
                .iter()
                .filter(|(tok, _)| !tok.is_empty() && rest.starts_with(tok.as_str()))
                .max_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| b.0.cmp(a.0)))
                .ok_or_else(|| {
                    BackendError::Protocol(format!(
                        "no token among the top {INCREMENTAL_TOP_LOGPROBS} continues {rest:?}"
                    ))
                })?;
            pos += token.len();
            out.push(TokenLogprob::new(token.clone(), *logprob)?);
        }
        Ok(out)
    }
}

/// Picks out the tokens covering `continuation` from an echoed prompt.
fn extract_continuation(
    lp: &WireLogprobs,
    context: &str,
    continuation: &str,
) -> Result<Vec<TokenLogprob>, BackendError> {
    if lp.tokens.len() != lp.token_logprobs.len() {
        return Err(BackendError::Protocol(
            "tokens and token_logprobs differ in length".into(),
        ));
    }
    let offsets: Vec<usize> = match &lp.text_offset {
        Some(o) if o.len() == lp.tokens.len() => o.clone(),
        Some(_) => {
            return Err(BackendError::Protocol(
                "text_offset length does not match tokens".into(),
            ))
        }
        None => lp
            .tokens
            .iter()
            .scan(0usize, |acc, t| {
                let start = *acc;
                *acc += t.chars().count();
                Some(start)
            })
            .collect(),
    };
    // Offsets are in characters, not bytes.
    let start = context.chars().count();
    let end = start + continuation.chars().count();
    let mut out = Vec::new();
    for ((tok, logprob), &off) in lp.tokens.iter().zip(&lp.token_logprobs).zip(&offsets) {
        if off < start {
            if off + tok.chars().count() > start {
                return Err(BackendError::TokenizationMismatch {
                    expected: continuation.to_string(),
                    got: format!("token {tok:?} straddles the context boundary"),
                });
            }
            continue;
        }
        if off >= end {
            break;
        }
        let logprob = logprob.ok_or_else(|| {
            BackendError::Protocol(format!("no logprob for continuation token {tok:?}"))
        })?;
        out.push(TokenLogprob::new(tok.clone(), logprob)?);
    }
    Ok(out)
}

fn seed_field(sampling: &SamplingParams) -> Value {
    sampling.seed.map_or(Value::Null, Value::from)
}

impl Backend for HttpBackend {
    fn score(&self, context: &str, continuation: &str) -> Result<Vec<TokenLogprob>, BackendError> {
        match self.scoring {
            ScoringMode::Echo => self.score_echo(context, continuation),
            ScoringMode::Incremental => self.score_incremental(context, continuation),
        }
    }

    fn sample(
        &self,
        context: &str,
        count: usize,
        sampling: &SamplingParams,
    ) -> Result<Vec<ScoredContinuation>, BackendError> {
        let mut body = json!({
            "model": self.model,
            "prompt": context,
            "n": count,
            "max_tokens": sampling.max_tokens,
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "logprobs": 1,
        });
        if sampling.seed.is_some() {
            body["seed"] = seed_field(sampling);
        }
        let resp = self.complete(body)?;
        resp.choices
            .into_iter()
            .map(|choice| {
                let lp = choice.logprobs.ok_or_else(|| {
                    BackendError::Protocol("sampled choice carries no logprobs".into())
                })?;
                if lp.tokens.len() != lp.token_logprobs.len() {
                    return Err(BackendError::Protocol(
                        "tokens and token_logprobs differ in length".into(),
                    ));
                }
                let tokens = lp
                    .tokens
                    .into_iter()
                    .zip(lp.token_logprobs)
                    .map(|(tok, l)| {
                        let l = l.ok_or_else(|| {
                            BackendError::Protocol(format!("no logprob for sampled token {tok:?}"))
                        })?;
                        TokenLogprob::new(tok, l)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let joined: String = tokens.iter().map(|t| t.token_text.as_str()).collect();
                if joined != choice.text {
                    log::debug!("sampled text {:?} differs from token join {joined:?}", choice.text);
                }
                Ok(ScoredContinuation::new(
                    tokens,
                    FinishReason::from_wire(choice.finish_reason.as_deref()),
                ))
            })
            .collect()
    }

    fn chat(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        sampling: &SamplingParams,
    ) -> Result<String, BackendError> {
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_prompt},
            ],
            "max_tokens": sampling.max_tokens,
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
        });
        if sampling.seed.is_some() {
            body["seed"] = seed_field(sampling);
        }
        let resp: ChatResponse = self.post("/v1/chat/completions", &body)?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol("chat response carries no content".into()))
    }
}
