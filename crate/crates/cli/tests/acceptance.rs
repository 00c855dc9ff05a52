//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use relaxeval::analytics::{
    correlation_matrix, pearson, self_consistency, Axis, CorrelationMethod, ScoreMatrix,
};
use relaxeval::backend::{BackendConfig, Client, TokenLogprob};
use relaxeval::harness::{read_jsonl, ScoreRecord};
use relaxeval::mock::{BigramLm, ChatMode, MockServer, MockServerConfig};
use relaxeval::perplexity::perplexity_family;
use relaxeval::relaxed::{relaxed_perplexity, RelaxedParams, Weighting};
use relaxeval::text_metrics::{bleu, rouge_l, rouge_n};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------------------
// Toy model with an independent oracle

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

    fn client(&self, exhaustive: bool) -> Client {
        let mut lm = BigramLm::new(self.symbols.clone(), self.start.clone(), self.rows.clone());
        if exhaustive {
            lm = lm.exhaustive();
        }
        Client::with_backend(Arc::new(lm), &BackendConfig::new("http://unused", "toy")).unwrap()
    }

    fn prob(&self, context: &str, text: &str) -> f64 {
        let mut prev = context.chars().last();
        let mut p = 1.0;
        for c in text.chars() {
            let row = match prev.and_then(|x| self.symbols.iter().position(|&s| s == x)) {
                Some(i) => &self.rows[i],
                None => &self.start,
            };
            p *= row[self.symbols.iter().position(|&s| s == c).unwrap()];
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

    fn word(&self, rng: &mut ChaCha8Rng, len: usize) -> String {
        (0..len).map(|_| self.symbols[rng.gen_range(0..self.symbols.len())]).collect()
    }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let cases = 24;
    for case in 0..cases {
        let q = 2 + case % 4;
        let n = if q >= 4 { 3 } else { 3 + case % 3 };
        let stride = 1 + case % 2;
        let toy = Toy::random(&mut rng, q);
        let qlen = rng.gen_range(0..4);
        let question = format!("Q:{}", toy.word(&mut rng, qlen));
        let tlen = rng.gen_range(1..4);
        let target = toy.word(&mut rng, tlen);
        let total: usize = (0..=n).map(|k| q.pow(k as u32)).sum();
        let params = RelaxedParams {
            ell: total,
            search_space: total,
            stride,
            max_tokens: n,
            top_p: 1.0,
            temperature: 1.0,
            seed: None,
            weighting: Weighting::Skewed,
        };
        let got = relaxed_perplexity(&toy.client(true), &question, &target, &params)
            .map_err(|e| format!("case {case}: {e}"))?;
        let oracle: f64 = (0..=n)
            .step_by(stride)
            .map(|i| {
                -toy.strings_of_len(i)
                    .iter()
                    .map(|p| toy.prob(&format!("{question}{p}"), &target))
                    .sum::<f64>()
                    .ln()
            })
            .sum();
        let err = (got.relaxed_cross_entropy - oracle).abs();
        worst = worst.max(err);
        check(err < 1e-6, format!("case {case}: engine {} oracle {oracle}", got.relaxed_cross_entropy))?;
    }
    let secs = started.elapsed().as_secs_f64();
    check(secs < 10.0, format!("took {secs:.2}s"))?;
    Ok(format!("{cases} pairs, max |diff| {worst:.2e}, {secs:.2}s"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let toy = Toy::random(&mut rng, 2 + case % 4);
        let qlen = rng.gen_range(0..6);
        let question = format!("Question: {}", toy.word(&mut rng, qlen));
        let tlen = rng.gen_range(1..10);
        let target = toy.word(&mut rng, tlen);
        let params = RelaxedParams {
            max_tokens: 0,
            ell: 1,
            search_space: 1,
            seed: Some(case as u64),
            ..RelaxedParams::default()
        };
        let got = relaxed_perplexity(&toy.client(false), &question, &target, &params)
            .map_err(|e| format!("case {case}: {e}"))?;
        let classic = (-toy.prob(&question, &target).ln() / tlen as f64).exp();
        let rel = (got.relaxed_perplexity - classic).abs() / classic;
        worst = worst.max(rel);
        check(rel < 1e-9, format!("case {case}: rel {rel:e}"))?;
    }
    Ok(format!("100 cases, max rel {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..12);
        let tokens: Vec<TokenLogprob> = (0..n)
            .map(|i| TokenLogprob::new(format!("t{i} "), -rng.gen_range(0.0..8.0)).unwrap())
            .collect();
        let text: String = tokens.iter().map(|t| t.token_text.as_str()).collect();
        let s = perplexity_family(&tokens, &text).map_err(|e| e.to_string())?;
        let rel = (s.byte_perplexity - s.bits_per_byte.exp2()).abs() / s.byte_perplexity;
        worst = worst.max(rel);
        check(rel < 1e-12, format!("byte_ppl {} vs 2^bpb {}", s.byte_perplexity, s.bits_per_byte.exp2()))?;
        // And against the natural-log definition.
        let sum: f64 = tokens.iter().map(|t| t.logprob).sum();
        let direct = (-sum / text.len() as f64).exp();
        check(((s.byte_perplexity - direct) / direct).abs() < 1e-12, format!("byte_ppl {} vs {direct}", s.byte_perplexity))?;
    }
    let l = -2.0 * std::f64::consts::LN_2;
    let tokens = vec![
        TokenLogprob::new("ab", l).unwrap(),
        TokenLogprob::new("c", l).unwrap(),
        TokenLogprob::new("d", 2.0 * l).unwrap(),
    ];
    let s = perplexity_family(&tokens, "abcd").map_err(|e| e.to_string())?;
    check(
        s.bits_per_byte == 2.0 && s.byte_perplexity == 4.0 && s.word_perplexity == 256.0,
        format!("abcd gave bpb {} byte_ppl {} word_ppl {}", s.bits_per_byte, s.byte_perplexity, s.word_perplexity),
    )?;
    Ok(format!("identity max rel {worst:.2e}; abcd = (2, 4, 256) exactly"))
}

fn criterion_4() -> Outcome {
    let r1 = rouge_n(&["a", "b", "c"], &["a", "c", "d"], 1).f1;
    check((r1 - 2.0 / 3.0).abs() < 1e-12, format!("rouge1 {r1}"))?;
    let rl = rouge_l(&["a", "b", "c", "d"], &["a", "c", "d"]).f1;
    check((rl - 6.0 / 7.0).abs() < 1e-12, format!("rougeL {rl}"))?;
    let b = bleu(&["a"], &["a"]);
    check((b - 1.0).abs() < 1e-12, format!("bleu {b}"))?;
    Ok(format!("rouge1 {r1:.12}, rougeL {rl:.12}, bleu {b}"))
}

fn criterion_5() -> Outcome {
    let mut m = BTreeMap::new();
    m.insert("p".to_string(), vec![1.0, 2.0, 3.0]);
    let cv = self_consistency(&m).map_err(|e| e.to_string())?.cv["p"];
    let want = (2.0f64 / 3.0).sqrt() / 2.0;
    check((cv - want).abs() < 1e-9, format!("CV {cv}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let rows = rng.gen_range(3..9);
        let cols = rng.gen_range(2..7);
        let values: Vec<Vec<Option<f64>>> = (0..rows)
            .map(|_| (0..cols).map(|_| Some(rng.gen_range(-5.0..5.0))).collect())
            .collect();
        let labels = |n: usize, p: &str| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let sm = ScoreMatrix::new(labels(rows, "m"), labels(cols, "c"), values).map_err(|e| e.to_string())?;
        let method = if k % 2 == 0 { CorrelationMethod::Pearson } else { CorrelationMethod::Spearman };
        let c = correlation_matrix(&sm, Axis::Columns, method).map_err(|e| e.to_string())?;
        for i in 0..cols {
            let d = c.values[i][i].ok_or("missing diagonal")?;
            worst = worst.max((d - 1.0).abs());
            check((d - 1.0).abs() < 1e-12, format!("matrix {k}: diagonal {d}"))?;
            for j in 0..cols {
                let (a, b) = (c.values[i][j], c.values[j][i]);
                check(a == b, format!("matrix {k}: {a:?} vs {b:?}"))?;
            }
        }
    }

    let mut shift_worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(3..30);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = rng.gen_range(0.1..10.0);
        let b = rng.gen_range(-10.0..10.0);
        let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let (r0, r1) = (pearson(&x, &y), pearson(&moved, &y));
        let (r0, r1) = (r0.map_err(|e| e.to_string())?, r1.map_err(|e| e.to_string())?);
        shift_worst = shift_worst.max((r0 - r1).abs());
        check((r0 - r1).abs() < 1e-12, format!("pearson {r0} vs {r1}"))?;
    }
    Ok(format!(
        "CV {cv:.9}; 1000 matrices symmetric, max |diag-1| {worst:.1e}; affine max diff {shift_worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// CLI helpers

fn relaxeval(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_relaxeval"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "relaxeval {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_lines(path: &Path, lines: &[String]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn free_items(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            format!(
                r#"{{"id":"f{i}","question":"what does symptom {i} indicate?","target":"it may indicate a mild infection"}}"#
            )
        })
        .collect()
}

fn read_matrix(path: &Path) -> Result<ScoreMatrix, String> {
    ScoreMatrix::from_csv_path(path).map_err(|e| format!("{}: {e}", path.display()))
}

const PPL: [&str; 3] = ["word_perplexity", "byte_perplexity", "bits_per_byte"];

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("sc.jsonl");
    write_lines(&ds, &free_items(5));
    let metrics = PPL.join(",");
    let mut notes = Vec::new();
    for (noise, label) in [(0.0, "fixed"), (0.5, "noisy")] {
        let server = MockServer::start(MockServerConfig {
            noise,
            seed: 9,
            ..MockServerConfig::default()
        })
        .unwrap();
        let out = dir.path().join(label);
        relaxeval(&[
            "score", "--out-dir", s(&out), "--dataset", s(&ds), "--backend-url", &server.base_url(),
            "--model", "m", "--metrics", &metrics, "--repetitions", "11", "--seed", "1",
        ])?;
        relaxeval(&["analyze", "--out-dir", s(&out), "--mode", "self_consistency"])?;
        let var = read_matrix(&out.join("analysis/self_consistency_variance.csv"))?;
        let cv = read_matrix(&out.join("analysis/self_consistency_cv.csv"))?;
        for metric in PPL {
            let col = |m: &ScoreMatrix| {
                m.col_labels
                    .iter()
                    .position(|c| c == metric)
                    .map(|j| m.column(j))
                    .ok_or(format!("no {metric} column"))
            };
            let (v, c) = (col(&var)?, col(&cv)?);
            let (v, c) = (v[0].ok_or("missing variance")?, c[0].ok_or("missing cv")?);
            if noise == 0.0 {
                check(v == 0.0 && c == 0.0, format!("{metric}: variance {v}, cv {c} with a fixed backend"))?;
            } else {
                check(v > 0.0 && c > 0.0 && c.is_finite(), format!("{metric}: cv {c} with noise"))?;
                notes.push(format!("{metric} cv {c:.3e}"));
            }
        }
    }
    Ok(format!("fixed: zero variance for all 3 metrics over 11 runs; noisy: {}", notes.join(", ")))
}

fn resilience_run(chat: ChatMode, dir: &Path) -> Result<(PathBuf, Vec<ScoreRecord>, Value), String> {
    let server = MockServer::start(MockServerConfig {
        chat,
        ..MockServerConfig::default()
    })
    .unwrap();
    let ds = dir.join("res.jsonl");
    write_lines(&ds, &free_items(6));
    let out = dir.join("run");
    let url = server.base_url();
    let common = ["--out-dir", s(&out), "--dataset", s(&ds), "--backend-url", &url, "--model", "m", "--seed", "3"];
    relaxeval(&[&["gen"], &common[..], &["--max-tokens", "40"]].concat())?;
    relaxeval(&[&["rephrase"], &common[..], &["--rephrasings", "6"]].concat())?;
    relaxeval(&[&["score"], &common[..], &["--metrics", "rouge1,rouge2,rougeL,bleu"]].concat())?;
    relaxeval(&["analyze", "--out-dir", s(&out), "--mode", "resilience"])?;
    let records: Vec<ScoreRecord> = read_jsonl(&out.join("scores.jsonl")).map_err(|e| e.to_string())?;
    let json: Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("analysis/resilience.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    Ok((out, records, json))
}

fn criterion_7() -> Outcome {
    let echo_dir = tempfile::tempdir().unwrap();
    let (out, records, json) = resilience_run(ChatMode::Echo, echo_dir.path())?;
    let variants = records.iter().map(|r| r.rephrasing).max().unwrap_or(0);
    check(variants == 6, format!("expected 6 rephrasings, found {variants}"))?;
    let m = read_matrix(&out.join("analysis/resilience.csv"))?;
    check(
        m.values.iter().flatten().all(|v| *v == Some(0.0)),
        format!("echo rephraser gave non-zero means {:?}", m.values),
    )?;
    let mut n_echo = 0;
    for cols in json["models"]["m"].as_object().ok_or("no per-model detail")?.values() {
        for v in cols["scaled_variances"].as_object().ok_or("no scaled variances")?.values() {
            check(v.as_f64() == Some(0.0), format!("echo scaled variance {v}"))?;
            n_echo += 1;
        }
    }

    let perturb_dir = tempfile::tempdir().unwrap();
    let (_, records, json) = resilience_run(ChatMode::Perturb, perturb_dir.path())?;
    // Direct recomputation: per (item, repetition) population variance over
    // the original and its rephrasings, divided by the column's range.
    let mut groups: BTreeMap<(String, String), BTreeMap<usize, f64>> = BTreeMap::new();
    let mut all: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &records {
        let v = r.value.ok_or("missing score")?;
        let key = format!("{}/{}/{}", r.benchmark, r.item_id, r.repetition);
        groups.entry((r.column(), key)).or_default().insert(r.rephrasing, v);
        all.entry(r.column()).or_default().push(v);
    }
    let mut n = 0;
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for ((col, key), vals) in &groups {
        let xs: Vec<f64> = vals.values().copied().collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        let col_vals = &all[col];
        let range = col_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - col_vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let want = if range == 0.0 { 0.0 } else { var / range };
        let got = json["models"]["m"][col]["scaled_variances"][key]
            .as_f64()
            .ok_or(format!("no scaled variance for {col} {key}"))?;
        check(got.is_finite(), format!("{col} {key}: {got}"))?;
        worst = worst.max((got - want).abs());
        check((got - want).abs() < 1e-12, format!("{col} {key}: report {got} vs direct {want}"))?;
        if got > 0.0 {
            nonzero += 1;
        }
        n += 1;
    }
    check(nonzero > 0, "perturbing rephraser changed no score")?;
    Ok(format!(
        "echo: {n_echo} scaled variances all 0; perturb: {n} values match direct recomputation (max diff {worst:.1e}), {nonzero} non-zero"
    ))
}

fn criterion_8() -> Outcome {
    // Every row strongly prefers 'a'; the gold option is "aaa" in 15 of 20 items.
    let row = vec![0.6, 0.2, 0.1, 0.1];
    let lm = BigramLm::new(vec!['a', 'b', ' '], row.clone(), vec![row.clone(), row.clone(), row])
        .with_oov_logprob(-3.0);
    let server = MockServer::start_on("127.0.0.1:0", MockServerConfig::default(), vec![("mc".into(), lm)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("careqa.jsonl");
    let items: Vec<String> = (0..20)
        .map(|i| {
            let gold = if i < 15 { 0 } else { 1 };
            format!(r#"{{"id":"q{i:02}","question":"Which option {i}?","options":["aaa","bbb","bab","bba"],"gold_index":{gold}}}"#)
        })
        .collect();
    write_lines(&ds, &items);
    let out = dir.path().join("run");
    relaxeval(&[
        "score", "--out-dir", s(&out), "--dataset", s(&ds), "--backend-url", &server.base_url(), "--model", "mc",
        "--metrics", "acc", "--seed", "1",
    ])?;
    relaxeval(&["report", "--out-dir", s(&out), "--report-format", "md"])?;
    let md = std::fs::read_to_string(out.join("report.md")).map_err(|e| e.to_string())?;
    let line = md.lines().find(|l| l.starts_with("| mc |")).ok_or(format!("no model row in {md}"))?;
    check(line.contains("0.750 ± 0.097"), format!("report row {line:?}"))?;
    Ok(line.to_string())
}

fn desk_dataset(path: &Path) {
    let mut lines = vec![
        r#"{"id":"ft1","question":"what is a normal resting heart rate?","target":"sixty to one hundred beats per minute"}"#.to_string(),
        r#"{"id":"ft2","question":"what does bp stand for?","target":"blood pressure"}"#.to_string(),
        r#"{"id":"ft3","question":"what organ makes insulin?","target":"the pancreas"}"#.to_string(),
        r#"{"id":"ft4","question":"how long does a cold last?","target":"about a week"}"#.to_string(),
        r#"{"id":"fp1","question":"what are the risks of too much vitamin d?","must_have":["vitamin d toxicity causes high calcium"],"nice_to_have":["stop supplements"]}"#.to_string(),
        r#"{"id":"fp2","question":"can i take ibuprofen with a cold?","must_have":"ibuprofen is usually safe for adults","nice_to_have":"check for stomach problems"}"#.to_string(),
        r#"{"id":"fp3","question":"is fever dangerous?","must_have":"very high fever needs care","nice_to_have":""}"#.to_string(),
    ];
    lines.push(r#"{"id":"mc1","question":"The Glisson capsule covers:","op1":"spleen","op2":"liver","op3":"kidney","op4":"pancreas","cop":2}"#.to_string());
    lines.push(r#"{"id":"mc2","question":"Insulin is made in the:","options":["liver","pancreas","skin"],"gold_index":1}"#.to_string());
    lines.push(r#"{"id":"mc3","question":"Normal body temperature is about:","options":["37 c","40 c"],"gold_index":0}"#.to_string());
    write_lines(path, &lines);
}

/// Full pipeline for three models; returns the wall time.
fn desk_run(root: &Path) -> Result<f64, String> {
    let started = Instant::now();
    let server = MockServer::start(MockServerConfig {
        chat: ChatMode::Perturb,
        ..MockServerConfig::default()
    })
    .unwrap();
    let url = server.base_url();
    let ds = root.join("desk.jsonl");
    desk_dataset(&ds);
    let mut score_files = Vec::new();
    for model in ["alpha", "beta", "gamma"] {
        let out = root.join(model);
        let common = ["--out-dir", s(&out), "--dataset", s(&ds), "--backend-url", &url, "--model", model, "--seed", "42"];
        relaxeval(&[&["gen"], &common[..], &["--repetitions", "2", "--max-tokens", "32"]].concat())?;
        relaxeval(&[&["rephrase"], &common[..], &["--rephrasings", "2"]].concat())?;
        relaxeval(&[&["score"], &common[..], &["--acc-norm"]].concat())?;
        relaxeval(
            &[
                &["relaxed"],
                &common[..],
                &["--ell", "2", "--search-space", "3", "--stride", "2", "--max-tokens", "4"],
            ]
            .concat(),
        )?;
        score_files.push(out.join("scores.jsonl"));
    }
    let pooled = root.join("pooled");
    let mut args: Vec<&str> = vec!["analyze", "--out-dir", s(&pooled)];
    for f in &score_files {
        args.extend(["--scores", s(f)]);
    }
    relaxeval(&args)?;
    args[0] = "report";
    relaxeval(&args)?;
    Ok(started.elapsed().as_secs_f64())
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect_files(root, &p, out);
        } else if p.file_name().is_some_and(|n| n != "config.json") {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&p).unwrap());
        }
    }
}

fn criterion_9() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ta = desk_run(a.path())?;
    let tb = desk_run(b.path())?;
    check(ta < 60.0 && tb < 60.0, format!("runs took {ta:.1}s and {tb:.1}s"))?;

    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    collect_files(a.path(), a.path(), &mut fa);
    collect_files(b.path(), b.path(), &mut fb);
    let names_a: Vec<&String> = fa.keys().collect();
    let names_b: Vec<&String> = fb.keys().collect();
    check(names_a == names_b, format!("file sets differ: {names_a:?} vs {names_b:?}"))?;
    for (name, bytes) in &fa {
        check(&fb[name] == bytes, format!("{name} differs between runs"))?;
    }
    for expected in [
        "alpha/generations.jsonl",
        "alpha/scores.jsonl",
        "alpha/relaxed.jsonl",
        "pooled/analysis/correlate_metrics__desk.csv",
        "pooled/analysis/resilience.csv",
        "pooled/analysis/self_consistency_cv.csv",
        "pooled/analysis/rank__desk.csv",
        "pooled/report.md",
    ] {
        check(fa.contains_key(expected), format!("missing {expected}"))?;
    }
    let records: Vec<ScoreRecord> = read_jsonl(&a.path().join("alpha/scores.jsonl")).map_err(|e| e.to_string())?;
    let metrics: std::collections::BTreeSet<&str> = records.iter().map(|r| r.metric.as_str()).collect();
    for m in ["rouge1", "rouge2", "rougeL", "bleu", "word_perplexity", "byte_perplexity", "bits_per_byte", "acc", "acc_norm", "relaxed_perplexity"] {
        check(metrics.contains(m), format!("no {m} rows"))?;
    }
    let failed = records.iter().filter(|r| r.value.is_none()).count();
    check(failed == 0, format!("{failed} score rows failed"))?;
    Ok(format!("{} files identical across runs; {ta:.1}s and {tb:.1}s", fa.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("relaxed perplexity matches brute-force oracle", criterion_1),
        ("max_tokens=0 reduces to classic perplexity", criterion_2),
        ("perplexity identities and abcd fixture", criterion_3),
        ("n-gram fixtures", criterion_4),
        ("analytics formulas", criterion_5),
        ("self-consistency of perplexity metrics", criterion_6),
        ("resilience protocol", criterion_7),
        ("MCQA pipeline reports 0.750 ± 0.097", criterion_8),
        ("end-to-end desk run", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
