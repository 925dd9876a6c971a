use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use creakbench::flow::{SolverConfig, TraceMethod};
use creakbench::synthexp::{run_experiment, write_report_csv, write_summary_json, ExperimentConfig};

use crate::flow::TraceArg;
use crate::NumericalFailure;

/// Flags left unset keep the experiment defaults.
#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory for `report.csv` and `summary.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Creak/pitch correlation of the original corpus.
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    /// Pitch noise scale used when decorrelating.
    #[arg(long)]
    b: Option<f64>,
    #[arg(long = "beta-grid", value_delimiter = ',', allow_hyphen_values = true)]
    betas: Option<Vec<f64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    trace: Option<TraceArg>,
    #[arg(long, default_value_t = 1)]
    probes: usize,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        cfg.corpus.seed = seed;
        cfg.hyper.seed = seed;
        cfg.pairing.seed = seed;
        if let Some(v) = self.speakers {
            cfg.corpus.n_speakers = v;
        }
        if let Some(v) = self.utterances {
            cfg.corpus.utterances_per_speaker = v;
        }
        if let Some(v) = self.dim {
            cfg.corpus.d = v;
        }
        if let Some(v) = self.rho {
            cfg.corpus.creak_pitch_correlation = v;
        }
        if let Some(v) = self.b {
            cfg.b = v;
        }
        if let Some(v) = &self.betas {
            cfg.betas = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.hyper.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.hyper.learning_rate = v;
        }
        if let Some(v) = self.hidden {
            cfg.hyper.hidden = v;
        }
        if let Some(v) = self.steps {
            cfg.solver = SolverConfig::rk4(v);
            cfg.solver.validate()?;
        }
        match self.trace {
            Some(TraceArg::Exact) => cfg.hyper.trace = TraceMethod::Exact,
            Some(TraceArg::Hutchinson) => {
                if self.probes == 0 {
                    bail!("--probes must be positive");
                }
                cfg.hyper.trace = TraceMethod::Hutchinson { probes: self.probes };
            }
            None => {}
        }
        Ok(cfg)
    }
}

pub fn run(args: &SynthArgs, seed: u64) -> Result<()> {
    let cfg = args.config(seed)?;
    std::fs::create_dir_all(&args.out)?;
    let report = run_experiment(&cfg)?;
    write_report_csv(BufWriter::new(File::create(args.out.join("report.csv"))?), &report)?;
    write_summary_json(BufWriter::new(File::create(args.out.join("summary.json"))?), &report)?;
    for s in &report.systems {
        let eers: Vec<String> = s.points.iter().map(|p| format!("{:.4}", p.eer)).collect();
        eprintln!("{:>8}: slope {:?} eer [{}]", s.system, s.pitch_slope, eers.join(" "));
    }
    eprintln!("paper_pattern: {}", report.checks.paper_pattern);
    if !report.all_trained() {
        let failed: Vec<&str> = report.systems.iter().filter(|s| !s.trained()).map(|s| s.system.as_str()).collect();
        return Err(NumericalFailure(format!("training failed for: {}", failed.join(", "))).into());
    }
    Ok(())
}
