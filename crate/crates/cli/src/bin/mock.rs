//! Local OpenAI-style server over toy bigram models, for offline runs.

use anyhow::Result;
use clap::Parser;

use relaxeval::mock::{ChatMode, MockServer, MockServerConfig};

#[derive(Parser)]
#[command(name = "relaxeval-mock", version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8000")]
    bind: String,
    /// echo or perturb.
    #[arg(long, default_value = "echo")]
    chat: ChatMode,
    /// Uniform noise subtracted from scored logprobs.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Answer the first N requests with 503.
    #[arg(long, default_value_t = 0)]
    fail_first: u64,
    /// Reject prompt echo, forcing incremental scoring.
    #[arg(long)]
    no_echo: bool,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let a = Args::parse();
    let config = MockServerConfig {
        chat: a.chat,
        noise: a.noise,
        fail_first: a.fail_first,
        echo_supported: !a.no_echo,
        workers: a.workers,
        seed: a.seed,
    };
    let server = MockServer::start_on(&a.bind, config, Vec::new())?;
    println!("{}", server.base_url());
    log::info!("serving toy models at {}", server.base_url());
    server.join();
    Ok(())
}
