mod analyze;
mod corr;
mod data;
mod eer;
mod flow;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

/// Exit code for usage and input errors.
pub const EXIT_INPUT: u8 = 2;
/// Exit code for numerical failures (diverged integration, failed training).
pub const EXIT_NUMERICAL: u8 = 3;

/// Marks an error as a numerical failure.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

#[derive(Parser, Debug)]
#[command(name = "creakbench", version, about = "Creak/pitch disentanglement toolkit")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "CREAKBENCH_SEED", default_value_t = 0)]
    seed: u64,

    /// Worker threads (0 = one per core). Never changes outputs.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure voice-quality features and creak labels for a manifest.
    Analyze(analyze::AnalyzeArgs),
    /// Recentre per-gender pitch, resynthesise and relabel a corpus.
    Adapt(analyze::AdaptArgs),
    /// Pitch/creak correlation report from a features CSV.
    Corr(corr::CorrArgs),
    /// Train, apply or score a conditional flow.
    #[command(subcommand)]
    Flow(flow::FlowCommand),
    /// Base / adapted / combined flow comparison on synthetic embeddings.
    Synthexp(synth::SynthArgs),
    /// Equal error rate from trials or embeddings.
    Eer(eer::EerArgs),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(a) => analyze::run_analyze(&a),
        Command::Adapt(a) => analyze::run_adapt(&a, cli.seed),
        Command::Corr(a) => corr::run(&a),
        Command::Flow(c) => flow::run(c, cli.seed),
        Command::Synthexp(a) => synth::run(&a, cli.seed),
        Command::Eer(a) => eer::run(&a, cli.seed),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<NumericalFailure>() {
            return EXIT_NUMERICAL;
        }
        if let Some(e) = cause.downcast_ref::<creakbench::Error>() {
            if e.is_numerical() {
                return EXIT_NUMERICAL;
            }
        }
    }
    EXIT_INPUT
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub(crate) fn ensure_parent(path: &std::path::Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub(crate) fn require_file(path: &PathBuf, what: &str) -> Result<()> {
    if !path.is_file() {
        anyhow::bail!("{what} '{}' is not a readable file", path.display());
    }
    Ok(())
}
