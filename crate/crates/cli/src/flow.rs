use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use creakbench::flow::{train, FlowModel, SolverConfig, TraceMethod, TrainHyper, DEFAULT_STEPS};
use log::info;

use crate::data::{read_rows, write_rows, EmbeddingRow};
use crate::{ensure_parent, require_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceArg {
    Exact,
    Hutchinson,
}

#[derive(Args, Debug, Clone)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 200)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub hidden_layers: usize,
    /// Fixed RK4 steps over the unit time interval.
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = TraceArg::Exact)]
    pub trace: TraceArg,
    /// Rademacher probes per sample for the Hutchinson trace.
    #[arg(long, default_value_t = 1)]
    pub probes: usize,
}

impl HyperArgs {
    pub fn trace_method(&self) -> Result<TraceMethod> {
        Ok(match self.trace {
            TraceArg::Exact => TraceMethod::Exact,
            TraceArg::Hutchinson if self.probes == 0 => bail!("--probes must be positive"),
            TraceArg::Hutchinson => TraceMethod::Hutchinson { probes: self.probes },
        })
    }

    pub fn hyper(&self, seed: u64) -> Result<TrainHyper> {
        Ok(TrainHyper {
            batch_size: self.batch_size,
            learning_rate: self.lr,
            epochs: self.epochs,
            seed,
            hidden: self.hidden,
            hidden_layers: self.hidden_layers,
            trace: self.trace_method()?,
        })
    }

    pub fn solver(&self) -> Result<SolverConfig> {
        let cfg = SolverConfig::rk4(self.steps);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum FlowCommand {
    /// Fit a flow to an embeddings file and save it.
    Train {
        /// JSON Lines embeddings with `attrs` or `creak_prob`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Shift the creak attribute of every embedding by each beta.
    Manipulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated creak shifts.
        #[arg(long = "beta-grid", alias = "beta", value_delimiter = ',', allow_hyphen_values = true, required = true)]
        betas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the log-likelihood of every embedding as `id,loglik` CSV.
    Loglik {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_model(path: &PathBuf) -> Result<FlowModel> {
    require_file(path, "model")?;
    FlowModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn split(rows: &[EmbeddingRow]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let s = rows.iter().map(|r| r.embedding.clone()).collect();
    let a = rows.iter().map(|r| r.attributes().map(|a| a.to_vec())).collect::<Result<_>>()?;
    Ok((s, a))
}

pub fn run(cmd: FlowCommand, seed: u64) -> Result<()> {
    match cmd {
        FlowCommand::Train { data, model, hyper } => {
            require_file(&data, "data")?;
            let rows = read_rows(&data)?;
            let (s, a) = split(&rows)?;
            let dataset: Vec<_> = s.into_iter().zip(a).collect();
            let outcome = train(&dataset, &hyper.hyper(seed)?, &hyper.solver()?)?;
            ensure_parent(&model)?;
            outcome.model.save(&model)?;
            println!("final_nll {}", outcome.model.final_nll());
            info!("saved model to {}", model.display());
        }
        FlowCommand::Manipulate { model, data, betas, out } => {
            let m = load_model(&model)?;
            require_file(&data, "data")?;
            let rows = read_rows(&data)?;
            let (s, _) = split(&rows)?;
            let attrs = rows.iter().map(EmbeddingRow::attributes).collect::<Result<Vec<_>>>()?;
            let a: Vec<Vec<f64>> = attrs.iter().map(|v| v.to_vec()).collect();
            let mut written = Vec::with_capacity(rows.len() * betas.len());
            for &beta in &betas {
                if !beta.is_finite() {
                    bail!("beta must be finite");
                }
                let shifted: Vec<Vec<f64>> = attrs.iter().map(|v| v.shift_creak(beta).to_vec()).collect();
                let moved = m.manipulate_batch(&s, &a, &shifted)?;
                for ((row, emb), attr) in rows.iter().zip(moved).zip(shifted) {
                    written.push(EmbeddingRow {
                        id: row.id.clone(),
                        speaker_id: row.speaker_id.clone(),
                        embedding: emb,
                        attrs: Some(attr),
                        creak_prob: None,
                        beta: Some(beta),
                    });
                }
            }
            write_rows(&out, &written)?;
        }
        FlowCommand::Loglik { model, data, out } => {
            let m = load_model(&model)?;
            require_file(&data, "data")?;
            let rows = read_rows(&data)?;
            let (s, a) = split(&rows)?;
            let ll = m.log_likelihood_batch(&s, &a)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["id", "loglik"])?;
            for (r, v) in rows.iter().zip(&ll) {
                w.write_record([r.id.clone(), v.to_string()])?;
            }
            let text = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
            match out {
                Some(p) => {
                    ensure_parent(&p)?;
                    std::fs::write(&p, text)?;
                }
                None => std::io::stdout().lock().write_all(&text)?,
            }
            if !ll.is_empty() {
                info!("mean nll {}", -ll.iter().sum::<f64>() / ll.len() as f64);
            }
        }
    }
    Ok(())
}
