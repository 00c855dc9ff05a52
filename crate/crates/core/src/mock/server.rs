//! Local OpenAI-style HTTP server backed by [`BigramLm`] toy models.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

use super::{chat_reply, BigramLm, ChatMode};
use crate::backend::{FinishReason, SamplingParams};

#[derive(Debug, Clone)]
pub struct MockServerConfig {
    pub chat: ChatMode,
    /// Uniform noise in `[0, noise)` subtracted from echoed prompt logprobs.
    pub noise: f64,
    /// Answer the first `fail_first` requests with 503.
    pub fail_first: u64,
    /// When false, requests with `echo: true` are rejected with 400.
    pub echo_supported: bool,
    pub workers: usize,
    pub seed: u64,
}

impl Default for MockServerConfig {
    fn default() -> Self {
        Self {
            chat: ChatMode::Echo,
            noise: 0.0,
            fail_first: 0,
            echo_supported: true,
            workers: 4,
            seed: 0,
        }
    }
}

struct State {
    config: MockServerConfig,
    models: Mutex<HashMap<String, Arc<BigramLm>>>,
    requests: AtomicU64,
    noise_rng: Mutex<ChaCha8Rng>,
    sample_rng: Mutex<ChaCha8Rng>,
    bodies: Mutex<Vec<Value>>,
}

impl State {
    fn model(&self, name: &str) -> Arc<BigramLm> {
        self.models
            .lock()
            .unwrap()
            .entry(name.to_string())
            .or_insert_with(|| Arc::new(BigramLm::text_model(name)))
            .clone()
    }
}

/// A running mock server; stops when dropped.
pub struct MockServer {
    addr: SocketAddr,
    server: Arc<Server>,
    state: Arc<State>,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(config: MockServerConfig) -> std::io::Result<Self> {
        Self::start_on("127.0.0.1:0", config, Vec::new())
    }

    /// Start with explicit models; unknown model names get
    /// [`BigramLm::text_model`].
    pub fn start_on(
        bind: &str,
        config: MockServerConfig,
        models: Vec<(String, BigramLm)>,
    ) -> std::io::Result<Self> {
        let server = Server::http(bind).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("mock server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let state = Arc::new(State {
            models: Mutex::new(
                models
                    .into_iter()
                    .map(|(name, lm)| (name, Arc::new(lm)))
                    .collect(),
            ),
            requests: AtomicU64::new(0),
            noise_rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            sample_rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1))),
            bodies: Mutex::new(Vec::new()),
            config,
        });
        let workers = (0..state.config.workers.max(1))
            .map(|_| {
                let server = server.clone();
                let state = state.clone();
                std::thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        handle(&state, req);
                    }
                })
            })
            .collect();
        Ok(Self {
            addr,
            server,
            state,
            workers,
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn request_count(&self) -> u64 {
        self.state.requests.load(Ordering::SeqCst)
    }

    /// JSON bodies of every request received so far.
    pub fn request_bodies(&self) -> Vec<Value> {
        self.state.bodies.lock().unwrap().clone()
    }

    /// Block the calling thread until the server is stopped externally.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn respond(req: Request, status: u16, body: Value) {
    let header = Header::from_bytes("Content-Type", "application/json").unwrap();
    let resp = Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(header);
    let _ = req.respond(resp);
}

fn handle(state: &State, mut req: Request) {
    let n = state.requests.fetch_add(1, Ordering::SeqCst);
    if n < state.config.fail_first {
        return respond(req, 503, json!({"error": {"message": "warming up"}}));
    }
    let mut raw = String::new();
    if req.as_reader().read_to_string(&mut raw).is_err() {
        return respond(req, 400, json!({"error": {"message": "unreadable body"}}));
    }
    let body: Value = match serde_json::from_str(&raw) {
        Ok(v) => v,
        Err(e) => return respond(req, 400, json!({"error": {"message": e.to_string()}})),
    };
    state.bodies.lock().unwrap().push(body.clone());
    let result = match (req.method(), req.url()) {
        (Method::Post, "/v1/completions") => completions(state, body),
        (Method::Post, "/v1/chat/completions") => chat(state, body),
        _ => Err((404, "no such route".to_string())),
    };
    match result {
        Ok(v) => respond(req, 200, v),
        Err((code, msg)) => respond(req, code, json!({"error": {"message": msg}})),
    }
}

#[derive(Deserialize)]
struct CompletionRequest {
    model: String,
    prompt: String,
    #[serde(default = "default_max_tokens")]
    max_tokens: usize,
    #[serde(default = "one")]
    temperature: f64,
    #[serde(default = "one")]
    top_p: f64,
    #[serde(default)]
    logprobs: Option<usize>,
    #[serde(default)]
    echo: bool,
    #[serde(default = "one_usize")]
    n: usize,
    #[serde(default)]
    seed: Option<u64>,
}

fn default_max_tokens() -> usize {
    16
}
fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}

fn top_map(lm: &BigramLm, prev: Option<char>, k: usize) -> Value {
    let map: serde_json::Map<String, Value> = lm
        .top_tokens(prev, k)
        .into_iter()
        .map(|(t, l)| (t, json!(l)))
        .collect();
    Value::Object(map)
}

fn finish_str(f: FinishReason) -> &'static str {
    match f {
        FinishReason::Length => "length",
        FinishReason::Stop => "stop",
        FinishReason::Other => "other",
    }
}

fn completions(state: &State, body: Value) -> Result<Value, (u16, String)> {
    let req: CompletionRequest =
        serde_json::from_value(body).map_err(|e| (400, e.to_string()))?;
    if req.echo && !state.config.echo_supported {
        return Err((400, "echo is not supported by this server".into()));
    }
    let lm = state.model(&req.model);
    let sampling = SamplingParams {
        top_p: req.top_p,
        temperature: req.temperature,
        max_tokens: req.max_tokens,
        seed: req.seed,
    };
    let k = req.logprobs.unwrap_or(0);
    let prompt_chars: Vec<char> = req.prompt.chars().collect();
    let mut seeded = req.seed.map(ChaCha8Rng::seed_from_u64);

    let mut choices = Vec::new();
    for index in 0..req.n.max(1) {
        let generated = {
            let mut shared = state.sample_rng.lock().unwrap();
            let rng: &mut ChaCha8Rng = match seeded.as_mut() {
                Some(r) => r,
                None => &mut shared,
            };
            if req.max_tokens == 0 {
                crate::backend::ScoredContinuation::new(Vec::new(), FinishReason::Length)
            } else {
                lm.sample_one(&req.prompt, &sampling, rng)
            }
        };
        let mut tokens: Vec<String> = Vec::new();
        let mut token_logprobs: Vec<Value> = Vec::new();
        let mut offsets: Vec<usize> = Vec::new();
        let mut tops: Vec<Value> = Vec::new();
        let mut text = String::new();
        if req.echo {
            let mut prev = None;
            for (i, &c) in prompt_chars.iter().enumerate() {
                tokens.push(c.to_string());
                offsets.push(i);
                if i == 0 {
                    token_logprobs.push(Value::Null);
                    tops.push(Value::Null);
                } else {
                    let mut lp = lm.token_logprob(prev, c).map_err(|e| (400, e.to_string()))?;
                    if state.config.noise > 0.0 {
                        lp -= state.noise_rng.lock().unwrap().gen_range(0.0..state.config.noise);
                    }
                    token_logprobs.push(json!(lp));
                    tops.push(top_map(&lm, prev, k.max(1)));
                }
                prev = Some(c);
            }
            text.push_str(&req.prompt);
        }
        let mut prev = prompt_chars.last().copied();
        let mut offset = prompt_chars.len();
        for t in &generated.tokens {
            tokens.push(t.token_text.clone());
            token_logprobs.push(json!(t.logprob));
            offsets.push(offset);
            tops.push(top_map(&lm, prev, k.max(1)));
            offset += t.token_text.chars().count();
            prev = t.token_text.chars().last();
            text.push_str(&t.token_text);
        }
        if tokens.is_empty() && k > 0 {
            // Zero-length completion: still report what the next token
            // distribution looks like.
            tops.push(top_map(&lm, prev, k));
        }
        let logprobs = if req.logprobs.is_some() {
            json!({
                "tokens": tokens,
                "token_logprobs": token_logprobs,
                "text_offset": offsets,
                "top_logprobs": tops,
            })
        } else {
            Value::Null
        };
        choices.push(json!({
            "index": index,
            "text": text,
            "finish_reason": finish_str(generated.finish_reason),
            "logprobs": logprobs,
        }));
    }
    Ok(json!({
        "id": "cmpl-mock",
        "object": "text_completion",
        "model": req.model,
        "choices": choices,
    }))
}

fn chat(state: &State, body: Value) -> Result<Value, (u16, String)> {
    let model = body["model"].as_str().unwrap_or("mock").to_string();
    let user = body["messages"]
        .as_array()
        .and_then(|msgs| msgs.iter().rev().find(|m| m["role"] == "user"))
        .and_then(|m| m["content"].as_str())
        .ok_or((400, "no user message".to_string()))?;
    if user.is_empty() {
        return Err((400, "empty user message".into()));
    }
    let reply = chat_reply(state.config.chat, user, body["seed"].as_u64());
    Ok(json!({
        "id": "chatcmpl-mock",
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": reply},
            "finish_reason": "stop",
        }],
    }))
}
