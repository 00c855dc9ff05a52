//! The HTTP client against the local mock server.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use relaxeval::backend::{
    Backend, BackendConfig, BackendError, Client, SamplingParams, ScoredContinuation, ScoringMode, TokenLogprob,
};
use relaxeval::mock::{BigramLm, MockServer, MockServerConfig};

fn toy() -> BigramLm {
    BigramLm::new(
        vec!['a', 'b', ' '],
        vec![0.4, 0.3, 0.2, 0.1],
        vec![
            vec![0.1, 0.5, 0.3, 0.1],
            vec![0.6, 0.1, 0.2, 0.1],
            vec![0.45, 0.45, 0.05, 0.05],
        ],
    )
    .with_oov_logprob(-9.0)
}

fn server(config: MockServerConfig) -> MockServer {
    MockServer::start_on("127.0.0.1:0", config, vec![("toy".into(), toy())]).unwrap()
}

fn config(s: &MockServer) -> BackendConfig {
    let mut c = BackendConfig::new(s.base_url(), "toy");
    c.backoff_ms = 1;
    c.timeout_s = 10.0;
    c
}

#[test]
fn echo_scores_match_the_model() {
    let s = server(MockServerConfig::default());
    let client = Client::from_config(&config(&s)).unwrap();
    let lm = toy();
    for (ctx, cont) in [("Question: x?\nAnswer:", " ab"), ("ab", "ba ab"), ("zz", "a")] {
        let got = client.score_continuation(ctx, cont).unwrap();
        let want = lm.score_text(ctx, cont).unwrap();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.token_text, w.token_text);
            assert!((g.logprob - w.logprob).abs() < 1e-12);
        }
    }
}

#[test]
fn incremental_scoring_agrees_with_echo() {
    let s = server(MockServerConfig {
        echo_supported: false,
        ..MockServerConfig::default()
    });
    let mut c = config(&s);
    let echo_client = Client::from_config(&c).unwrap();
    assert!(matches!(
        echo_client.score_continuation("ab", "ba"),
        Err(BackendError::Protocol(_))
    ));
    c.scoring = ScoringMode::Incremental;
    let client = Client::from_config(&c).unwrap();
    let got = client.score_continuation("a b", "ab a").unwrap();
    let want = toy().score_text("a b", "ab a").unwrap();
    let sum = |v: &[TokenLogprob]| v.iter().map(|t| t.logprob).sum::<f64>();
    assert!((sum(&got) - sum(&want)).abs() < 1e-12);
    assert_eq!(got.len(), 4);
}

#[test]
fn transient_failures_are_retried() {
    let s = server(MockServerConfig {
        fail_first: 2,
        ..MockServerConfig::default()
    });
    let client = Client::from_config(&config(&s)).unwrap();
    assert!(client.score_continuation("a", "b").is_ok());
    assert_eq!(client.request_count(), 3);

    let s = server(MockServerConfig {
        fail_first: 10,
        ..MockServerConfig::default()
    });
    let mut c = config(&s);
    c.max_retries = 2;
    let client = Client::from_config(&c).unwrap();
    assert!(matches!(client.score_continuation("a", "b"), Err(BackendError::Transport(_))));
    assert_eq!(s.request_count(), 3);
}

#[test]
fn cache_serves_repeated_requests() {
    let s = server(MockServerConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(&s);
    c.cache_path = Some(dir.path().to_path_buf());
    let seeded = SamplingParams {
        max_tokens: 4,
        seed: Some(1),
        ..SamplingParams::default()
    };
    let first = Client::from_config(&c).unwrap();
    let a = first.score_continuation("ab", "ab").unwrap();
    let sa = first.sample_continuations("ab", 3, &seeded).unwrap();
    assert_eq!(first.request_count(), 2);

    let second = Client::from_config(&c).unwrap();
    assert_eq!(second.score_continuation("ab", "ab").unwrap(), a);
    assert_eq!(second.sample_continuations("ab", 3, &seeded).unwrap(), sa);
    assert_eq!(second.request_count(), 0);

    // Unseeded draws always go to the backend.
    let unseeded = SamplingParams { seed: None, ..seeded };
    second.sample_continuations("ab", 3, &unseeded).unwrap();
    second.sample_continuations("ab", 3, &unseeded).unwrap();
    assert_eq!(second.request_count(), 2);
}

#[test]
fn sampling_over_http_is_reproducible_with_a_seed() {
    let s = server(MockServerConfig::default());
    let client = Client::from_config(&config(&s)).unwrap();
    let sampling = SamplingParams {
        max_tokens: 5,
        seed: Some(42),
        ..SamplingParams::default()
    };
    let a = client.sample_continuations("Q:", 8, &sampling).unwrap();
    let b = client.sample_continuations("Q:", 8, &sampling).unwrap();
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0].joint_logprob >= w[1].joint_logprob));
    let lm = toy();
    for c in &a {
        assert!(c.tokens.len() <= 5);
        if !c.tokens.is_empty() {
            let rescored = lm.score_text("Q:", &c.text()).unwrap();
            let sum: f64 = rescored.iter().map(|t| t.logprob).sum();
            assert!((sum - c.joint_logprob).abs() < 1e-9);
        }
    }
}

/// Records the largest number of simultaneous calls.
struct Gauge {
    now: AtomicUsize,
    peak: AtomicUsize,
}

impl Backend for Gauge {
    fn score(&self, _context: &str, continuation: &str) -> Result<Vec<TokenLogprob>, BackendError> {
        let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(n, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(20));
        self.now.fetch_sub(1, Ordering::SeqCst);
        Ok(vec![TokenLogprob::new(continuation, -1.0)?])
    }

    fn sample(&self, _: &str, _: usize, _: &SamplingParams) -> Result<Vec<ScoredContinuation>, BackendError> {
        unreachable!()
    }

    fn chat(&self, _: &str, user: &str, _: &SamplingParams) -> Result<String, BackendError> {
        Ok(user.to_string())
    }
}

#[test]
fn in_flight_requests_are_bounded() {
    let gauge = Arc::new(Gauge {
        now: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    });
    let mut c = BackendConfig::new("http://unused", "gauge");
    c.max_in_flight = 3;
    let client = Client::with_backend(gauge.clone(), &c).unwrap();
    std::thread::scope(|s| {
        for i in 0..16 {
            let client = &client;
            s.spawn(move || client.score_continuation("ctx", &format!("t{i}")).unwrap());
        }
    });
    let peak = gauge.peak.load(Ordering::SeqCst);
    assert!(peak <= 3, "peak {peak}");
    assert!(peak >= 2, "calls never overlapped");
    assert_eq!(client.request_count(), 16);
}
