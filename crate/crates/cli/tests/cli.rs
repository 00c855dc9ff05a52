//! Exit codes and failure artifacts of the command-line tool.

use std::path::Path;
use std::process::{Command, Output};

use relaxeval::mock::{MockServer, MockServerConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relaxeval")).args(args).output().unwrap()
}

fn dataset(dir: &Path) -> String {
    let p = dir.join("d.jsonl");
    std::fs::write(&p, "{\"id\":\"a\",\"question\":\"why?\",\"target\":\"because\"}\n").unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    // No config.json and no dataset.
    assert_eq!(run(&["gen", "--out-dir", out]).status.code(), Some(2));
    let ds = dataset(dir.path());
    let bad = run(&[
        "relaxed", "--out-dir", out, "--dataset", &ds, "--backend-url", "http://127.0.0.1:9", "--model", "m",
        "--ell", "5", "--search-space", "2",
    ]);
    assert_eq!(bad.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad.stderr));
    assert_eq!(run(&["analyze", "--out-dir", out, "--mode", "nonsense"]).status.code(), Some(2));
}

#[test]
fn missing_and_empty_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    // A score file that does not exist is a usage error.
    assert_eq!(run(&["analyze", "--out-dir", o]).status.code(), Some(2));
    // An empty one is a data problem.
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("scores.jsonl"), "").unwrap();
    assert_eq!(run(&["analyze", "--out-dir", o]).status.code(), Some(1));
    assert_eq!(run(&["report", "--out-dir", o]).status.code(), Some(1));
    assert!(!out.join("report.md").exists());
}

#[test]
fn backend_failures_are_recorded_and_exit_with_one() {
    let server = MockServer::start(MockServerConfig {
        fail_first: 1000,
        ..MockServerConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let out = dir.path().join("run");
    let r = run(&[
        "gen", "--out-dir", out.to_str().unwrap(), "--dataset", &ds, "--backend-url", &server.base_url(),
        "--model", "m", "--max-retries", "0", "--seed", "1",
    ]);
    assert_eq!(r.status.code(), Some(1));
    let failures = std::fs::read_to_string(out.join("gen_failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 1);
    assert!(failures.contains("\"item_id\":\"a\""));
    // Reusing the saved config, a healthy server completes the run.
    let healthy = MockServer::start(MockServerConfig::default()).unwrap();
    let r = run(&["gen", "--out-dir", out.to_str().unwrap(), "--backend-url", &healthy.base_url()]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let gens = std::fs::read_to_string(out.join("generations.jsonl")).unwrap();
    assert_eq!(gens.lines().count(), 1);
}
