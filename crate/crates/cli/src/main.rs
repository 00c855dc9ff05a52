use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use relaxeval::analytics::CorrelationMethod;
use relaxeval::backend::{BackendConfig, ScoringMode};
use relaxeval::harness::{
    aggregate, analyze, emit_matrix, emit_report, load_external_scores, read_jsonl,
    rephrase_outputs, run_generation, run_metrics, AnalysisMode, DatasetFormat, HarnessError,
    ReportFormat, RunConfig, ScoreRecord, StageSummary, RELAXED_METRIC,
};
use relaxeval::analytics::ScoreMatrix;

/// Evaluate language models on open-ended and multiple-choice benchmarks.
#[derive(Parser)]
#[command(name = "relaxeval", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample model outputs for every open-ended item.
    Gen(RunArgs),
    /// Add rephrased variants of every original output.
    Rephrase(RunArgs),
    /// Compute metrics for generations and references.
    Score(RunArgs),
    /// Compute relaxed perplexity for every open-ended target.
    Relaxed(RunArgs),
    /// Correlations, resilience, self-consistency and rankings.
    Analyze(AnalyzeArgs),
    /// Aggregate scores into csv, json or markdown tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run directory holding config.json and all outputs.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// jsonl or csv; guessed from the extension by default.
    #[arg(long)]
    format: Option<DatasetFormat>,
    /// Benchmark label; defaults to the dataset file name.
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long)]
    backend_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    /// echo or incremental.
    #[arg(long, value_parser = parse_scoring)]
    scoring: Option<ScoringMode>,
    /// Directory for the request cache.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    max_retries: Option<u32>,
    /// Comma-separated metric names.
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
    /// Also report per-byte normalized multiple-choice accuracy.
    #[arg(long)]
    acc_norm: bool,
    /// Declare external score column names as valid metrics.
    #[arg(long, value_delimiter = ',')]
    external_columns: Option<Vec<String>>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    rephrasings: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Generation length; for `relaxed`, the largest prefix offset.
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    ell: Option<usize>,
    #[arg(long)]
    search_space: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Score files to pool; defaults to the run directory's scores.jsonl.
    #[arg(long)]
    scores: Vec<PathBuf>,
    /// CSV tables of externally computed scores.
    #[arg(long)]
    external_scores: Vec<PathBuf>,
    /// Analyses to run; all by default.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<AnalysisMode>,
    /// pearson or spearman.
    #[arg(long, default_value = "pearson", value_parser = parse_method)]
    method: CorrelationMethod,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    scores: Vec<PathBuf>,
    /// csv, json or markdown; all three by default.
    #[arg(long, value_delimiter = ',')]
    report_format: Vec<ReportFormat>,
    /// Analysis matrices (CSV) to render as well.
    #[arg(long)]
    matrix: Vec<PathBuf>,
}

fn parse_scoring(s: &str) -> Result<ScoringMode, String> {
    match s {
        "echo" => Ok(ScoringMode::Echo),
        "incremental" => Ok(ScoringMode::Incremental),
        other => Err(format!("unknown scoring mode {other:?}")),
    }
}

fn parse_method(s: &str) -> Result<CorrelationMethod, String> {
    match s {
        "pearson" => Ok(CorrelationMethod::Pearson),
        "spearman" => Ok(CorrelationMethod::Spearman),
        other => Err(format!("unknown correlation method {other:?}")),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Gen,
    Rephrase,
    Score,
    Relaxed,
}

/// Start from the run directory's config.json (or fresh defaults) and apply
/// every flag that was given.
fn build_config(a: &RunArgs, stage: Stage) -> Result<RunConfig, HarnessError> {
    let missing = |flag: &str| {
        HarnessError::Config(format!(
            "--{flag} is required when {} has no config.json",
            a.out_dir.display()
        ))
    };
    let mut cfg = match RunConfig::load(&a.out_dir)? {
        Some(c) => c,
        None => {
            let dataset = a.dataset.clone().ok_or_else(|| missing("dataset"))?;
            let url = a.backend_url.clone().ok_or_else(|| missing("backend-url"))?;
            let model = a.model.clone().ok_or_else(|| missing("model"))?;
            RunConfig::new(dataset, BackendConfig::new(url, model), &a.out_dir)
        }
    };
    if let Some(d) = &a.dataset {
        if *d != cfg.dataset_path {
            let fresh = RunConfig::new(d.clone(), cfg.backend.clone(), &a.out_dir);
            cfg.dataset_format = fresh.dataset_format;
            cfg.benchmark = fresh.benchmark;
            cfg.dataset_path = d.clone();
        }
    }
    if let Some(f) = a.format {
        cfg.dataset_format = f;
    }
    if let Some(b) = &a.benchmark {
        cfg.benchmark = b.clone();
    }
    let be = &mut cfg.backend;
    if let Some(u) = &a.backend_url {
        be.base_url = u.clone();
    }
    if let Some(m) = &a.model {
        be.model_name = m.clone();
    }
    if let Some(k) = &a.api_key_env {
        be.api_key_env = k.clone();
    }
    if let Some(s) = a.scoring {
        be.scoring = s;
    }
    if let Some(c) = &a.cache_dir {
        be.cache_path = Some(c.clone());
    }
    if let Some(n) = a.max_in_flight {
        be.max_in_flight = n;
    }
    if let Some(t) = a.timeout {
        be.timeout_s = t;
    }
    if let Some(r) = a.max_retries {
        be.max_retries = r;
    }
    if let Some(cols) = &a.external_columns {
        cfg.external_columns = cols.iter().cloned().collect();
    }
    if let Some(m) = &a.metrics {
        cfg.metrics = m.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if a.acc_norm {
        cfg.metrics.insert("acc_norm".into());
    }
    if let Some(r) = a.repetitions {
        cfg.repetitions = r;
    }
    if let Some(r) = a.rephrasings {
        cfg.rephrasings = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = Some(s);
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }

    let relaxed_flags = a.ell.is_some() || a.search_space.is_some() || a.stride.is_some();
    if stage == Stage::Relaxed || relaxed_flags {
        let mut p = cfg.relaxed_params();
        if let Some(v) = a.ell {
            p.ell = v;
        }
        if let Some(v) = a.search_space {
            p.search_space = v;
        }
        if let Some(v) = a.stride {
            p.stride = v;
        }
        if stage == Stage::Relaxed {
            if let Some(v) = a.max_tokens {
                p.max_tokens = v;
            }
            if let Some(v) = a.top_p {
                p.top_p = v;
            }
            if let Some(v) = a.temperature {
                p.temperature = v;
            }
        }
        cfg.relaxed = Some(p);
    }
    if stage != Stage::Relaxed {
        if let Some(v) = a.max_tokens {
            cfg.sampling.max_tokens = v;
        }
        if let Some(v) = a.top_p {
            cfg.sampling.top_p = v;
        }
        if let Some(v) = a.temperature {
            cfg.sampling.temperature = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(stage: &str, s: &StageSummary) -> ExitCode {
    log::info!("{stage}: {} written, {} already present, {} failed", s.written, s.skipped, s.failures.len());
    println!("{stage}: {} written, {} skipped, {} failed", s.written, s.skipped, s.failures.len());
    if s.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run_stage(a: &RunArgs, stage: Stage) -> Result<ExitCode> {
    let cfg = build_config(a, stage)?;
    cfg.save()?;
    let code = match stage {
        Stage::Gen => summarize("gen", &run_generation(&cfg)?),
        Stage::Rephrase => {
            if cfg.rephrasings == 0 {
                return Err(HarnessError::Config("--rephrasings must be at least 1".into()).into());
            }
            summarize("rephrase", &rephrase_outputs(&cfg, cfg.rephrasings)?)
        }
        Stage::Score => summarize("score", &run_metrics(&cfg, None)?),
        Stage::Relaxed => {
            let only = [RELAXED_METRIC.to_string()].into_iter().collect();
            summarize("relaxed", &run_metrics(&cfg, Some(&only))?)
        }
    };
    Ok(code)
}

fn load_scores(out_dir: &Path, scores: &[PathBuf]) -> Result<Vec<ScoreRecord>> {
    let paths = if scores.is_empty() {
        vec![out_dir.join("scores.jsonl")]
    } else {
        scores.to_vec()
    };
    let mut records = Vec::new();
    for p in &paths {
        if !p.exists() {
            return Err(HarnessError::Config(format!("score file {} does not exist", p.display())).into());
        }
        records.extend(read_jsonl::<ScoreRecord>(p)?);
    }
    Ok(records)
}

fn run_analyze(a: &AnalyzeArgs) -> Result<ExitCode> {
    let records = load_scores(&a.out_dir, &a.scores)?;
    let mut external = Vec::new();
    for p in &a.external_scores {
        external.extend(load_external_scores(p)?);
    }
    let modes = if a.mode.is_empty() {
        AnalysisMode::ALL.to_vec()
    } else {
        a.mode.clone()
    };
    let dir = a.out_dir.join("analysis");
    let mut code = ExitCode::SUCCESS;
    for mode in modes {
        match analyze(&records, &external, mode, a.method, &dir) {
            Ok(out) => println!("{}: {} files written", mode.name(), out.files.len()),
            Err(e @ HarnessError::InsufficientData(_)) => {
                log::error!("{}: {e}", mode.name());
                println!("{}: skipped ({e})", mode.name());
                code = ExitCode::from(1);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(code)
}

fn run_report(a: &ReportArgs) -> Result<ExitCode> {
    let formats = if a.report_format.is_empty() {
        vec![ReportFormat::Markdown, ReportFormat::Csv, ReportFormat::Json]
    } else {
        a.report_format.clone()
    };
    let rows = aggregate(&load_scores(&a.out_dir, &a.scores)?);
    for f in &formats {
        let path = a.out_dir.join(format!("report.{}", f.extension()));
        emit_report(&rows, *f, &path)?;
        println!("wrote {}", path.display());
    }
    for m in &a.matrix {
        let matrix = ScoreMatrix::from_csv_path(m).map_err(HarnessError::from)?;
        let stem = m.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for f in &formats {
            let path = a.out_dir.join(format!("{stem}.{}", f.extension()));
            emit_matrix(&matrix, *f, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> ExitCode {
    match err.downcast_ref::<HarnessError>() {
        Some(e) if e.is_config_error() => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => run_stage(a, Stage::Gen),
        Command::Rephrase(a) => run_stage(a, Stage::Rephrase),
        Command::Score(a) => run_stage(a, Stage::Score),
        Command::Relaxed(a) => run_stage(a, Stage::Relaxed),
        Command::Analyze(a) => run_analyze(a),
        Command::Report(a) => run_report(a),
    }
    .context("relaxeval failed");
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
