//! Relaxed perplexity against brute-force enumeration of toy bigram models.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relaxeval::backend::{BackendConfig, Client, SamplingParams};
use relaxeval::mock::BigramLm;
use relaxeval::relaxed::{relaxed_perplexity, RelaxedParams, Weighting};

/// Raw model: symbols, start row and transition rows, each row ending in EOS.
struct Toy {
    symbols: Vec<char>,
    start: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl Toy {
    fn random(rng: &mut ChaCha8Rng, q: usize) -> Self {
        let symbols: Vec<char> = "abcde".chars().take(q).collect();
        let row = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..=q).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect::<Vec<_>>()
        };
        let start = row(rng);
        let rows = (0..q).map(|_| row(rng)).collect();
        Toy { symbols, start, rows }
    }

    fn lm(&self) -> BigramLm {
        BigramLm::new(self.symbols.clone(), self.start.clone(), self.rows.clone())
    }

    fn row(&self, prev: Option<char>) -> &[f64] {
        match prev.and_then(|c| self.symbols.iter().position(|&s| s == c)) {
            Some(i) => &self.rows[i],
            None => &self.start,
        }
    }

    /// P(text | context), teacher forced.
    fn prob(&self, context: &str, text: &str) -> f64 {
        let mut prev = context.chars().last();
        let mut p = 1.0;
        for c in text.chars() {
            let i = self.symbols.iter().position(|&s| s == c).unwrap();
            p *= self.row(prev)[i];
            prev = Some(c);
        }
        p
    }

    fn strings_of_len(&self, n: usize) -> Vec<String> {
        let mut out = vec![String::new()];
        for _ in 0..n {
            out = out
                .iter()
                .flat_map(|s| self.symbols.iter().map(move |c| format!("{s}{c}")))
                .collect();
        }
        out
    }

    /// Relaxed cross-entropy summing over every prefix of each offset.
    fn oracle(&self, question: &str, target: &str, max_tokens: usize, stride: usize, weighted: bool) -> f64 {
        let mut ce = 0.0;
        let mut i = 0;
        while i <= max_tokens {
            let p: f64 = self
                .strings_of_len(i)
                .iter()
                .map(|prefix| {
                    let w = if weighted { self.prob(question, prefix) } else { 1.0 };
                    w * self.prob(&format!("{question}{prefix}"), target)
                })
                .sum();
            ce -= p.ln();
            i += stride;
        }
        ce
    }

    /// Marginal probability that `target` starts right after `i` sampled
    /// tokens, by propagating the next-symbol distribution. Independent of
    /// any prefix enumeration.
    fn forward_marginal(&self, question: &str, target: &str, i: usize) -> f64 {
        let q = self.symbols.len();
        let first = self.row(question.chars().last());
        if i == 0 {
            return self.prob(question, target);
        }
        // dist[k] = P(first i tokens are non-EOS and token i is symbol k)
        let mut dist: Vec<f64> = first[..q].to_vec();
        for _ in 1..i {
            let mut next = vec![0.0; q];
            for (k, pk) in dist.iter().enumerate() {
                for (j, nj) in next.iter_mut().enumerate() {
                    *nj += pk * self.rows[k][j];
                }
            }
            dist = next;
        }
        dist.iter()
            .enumerate()
            .map(|(k, pk)| pk * self.prob(&self.symbols[k].to_string(), target))
            .sum()
    }
}

fn exhaustive_client(toy: &Toy) -> Client {
    Client::with_backend(Arc::new(toy.lm().exhaustive()), &BackendConfig::new("http://unused", "toy")).unwrap()
}

fn random_word(rng: &mut ChaCha8Rng, symbols: &[char], len: usize) -> String {
    (0..len).map(|_| symbols[rng.gen_range(0..symbols.len())]).collect()
}

fn n_sequences(q: usize, n: usize) -> usize {
    (0..=n).map(|k| q.pow(k as u32)).sum()
}

#[test]
fn matches_brute_force_enumeration() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    for case in 0..24 {
        let q = 2 + case % 3;
        let n = 3 + case % 2;
        let stride = 1 + case % 2;
        let toy = Toy::random(&mut rng, q);
        let client = exhaustive_client(&toy);
        let question = if case % 4 == 0 {
            "Question: what?\n".to_string()
        } else {
            let len = rng.gen_range(1..4);
            random_word(&mut rng, &toy.symbols, len)
        };
        let len = rng.gen_range(1..4);
        let target = random_word(&mut rng, &toy.symbols, len);
        let total = n_sequences(q, n);
        let params = RelaxedParams {
            ell: total,
            search_space: total,
            stride,
            max_tokens: n,
            top_p: 1.0,
            temperature: 1.0,
            seed: Some(case as u64),
            weighting: Weighting::Skewed,
        };
        let got = relaxed_perplexity(&client, &question, &target, &params).unwrap();
        let want = toy.oracle(&question, &target, n, stride, false);
        assert!(
            (got.relaxed_cross_entropy - want).abs() < 1e-6,
            "case {case}: {} vs {want}",
            got.relaxed_cross_entropy
        );
        let offsets: Vec<usize> = (0..=n).step_by(stride).collect();
        assert_eq!(got.offsets(), offsets);
        let norm = (got.max_offset + target.chars().count()) as f64;
        assert!((got.relaxed_perplexity - (want / norm).exp()).abs() < 1e-6 * got.relaxed_perplexity);
        cases += 1;
    }
    assert!(cases >= 20);
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn weighted_variant_is_the_marginal_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..10 {
        let toy = Toy::random(&mut rng, 3);
        let client = exhaustive_client(&toy);
        let target = random_word(&mut rng, &toy.symbols, 2);
        let question = random_word(&mut rng, &toy.symbols, 2);
        let n = 4;
        let total = n_sequences(3, n);
        let params = RelaxedParams {
            ell: total,
            search_space: total,
            stride: 1,
            max_tokens: n,
            top_p: 1.0,
            temperature: 1.0,
            seed: None,
            weighting: Weighting::SequenceWeighted,
        };
        let got = relaxed_perplexity(&client, &question, &target, &params).unwrap();
        let brute = toy.oracle(&question, &target, n, 1, true);
        let forward: f64 = (0..=n)
            .map(|i| -toy.forward_marginal(&question, &target, i).ln())
            .sum();
        assert!((brute - forward).abs() < 1e-9, "case {case}");
        assert!((got.relaxed_cross_entropy - forward).abs() < 1e-6, "case {case}");
        // Weighted terms are probabilities of disjoint events: never above one.
        assert!(got.terms.iter().all(|t| t.log_p_a_given_b <= 1e-12));
    }
}

#[test]
fn zero_max_tokens_is_classic_perplexity() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..100 {
        let toy = Toy::random(&mut rng, 2 + case % 4);
        let client = exhaustive_client(&toy);
        let qlen = rng.gen_range(0..5);
        let question = format!("Q{}", random_word(&mut rng, &toy.symbols, qlen));
        let tlen = rng.gen_range(1..8);
        let target = random_word(&mut rng, &toy.symbols, tlen);
        let params = RelaxedParams {
            max_tokens: 0,
            ell: 1,
            search_space: 1,
            ..RelaxedParams::default()
        };
        let got = relaxed_perplexity(&client, &question, &target, &params).unwrap();
        let classic = (-toy.prob(&question, &target).ln() / tlen as f64).exp();
        let rel = (got.relaxed_perplexity - classic).abs() / classic;
        assert!(rel < 1e-9, "case {case}: rel {rel}");
        assert_eq!(client.request_count(), 1, "only the target is scored");
    }
}

#[test]
fn top_candidates_are_the_most_probable_strings() {
    let toy = Toy {
        symbols: vec!['a', 'b', 'c'],
        start: vec![0.5, 0.25, 0.15, 0.1],
        rows: vec![
            vec![0.2, 0.45, 0.2, 0.15],
            vec![0.5, 0.1, 0.25, 0.15],
            vec![0.3, 0.3, 0.25, 0.15],
        ],
    };
    let n = 3;
    // Rank every string of length <= n by its teacher-forced probability.
    let mut all: Vec<(String, f64)> = (0..=n)
        .flat_map(|k| toy.strings_of_len(k))
        .map(|s| {
            let p = toy.prob("?", &s);
            (s, p)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1));
    assert!(all[4].1 > all[5].1 * (1.0 + 1e-9), "top five must be unambiguous");
    let top5: Vec<String> = all[..5].iter().map(|(s, _)| s.clone()).collect();

    // Sampling at top_p = 1 from the raw model with a large search space.
    let client = Client::with_backend(Arc::new(toy.lm()), &BackendConfig::new("http://unused", "toy")).unwrap();
    let sampling = SamplingParams {
        top_p: 1.0,
        temperature: 1.0,
        max_tokens: n,
        seed: Some(3),
    };
    let samples = client.sample_continuations("?", 4000, &sampling).unwrap();
    let set = relaxeval::relaxed::CandidateSet::from_samples("?", samples, 5);
    let got: Vec<String> = set.continuations.iter().map(|c| c.text()).collect();
    assert_eq!(got, top5);
}
