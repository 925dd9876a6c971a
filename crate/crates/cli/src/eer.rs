use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use creakbench::verify::{build_trials, eer, write_eer_curve_csv, EerResult, EmbeddedUtterance, PairingPolicy, TrialScore};
use serde::Deserialize;

use crate::data::read_rows;
use crate::{ensure_parent, require_file};

#[derive(Args, Debug)]
pub struct EerArgs {
    /// Trials CSV: `enroll_id,test_id,same_speaker,score` and optionally `beta`.
    #[arg(long, conflicts_with_all = ["originals", "manipulated"], required_unless_present = "originals")]
    trials: Option<PathBuf>,
    /// Unmanipulated embeddings (JSON Lines with `speaker_id`).
    #[arg(long, requires = "manipulated")]
    originals: Option<PathBuf>,
    /// Manipulated embeddings, as written by `flow manipulate`.
    #[arg(long, requires = "originals")]
    manipulated: Option<PathBuf>,
    /// Cap on trials per class before seeded subsampling.
    #[arg(long, default_value_t = PairingPolicy::default().max_per_class)]
    max_per_class: usize,
    /// EER curve CSV (`beta,eer,threshold,n_target,n_nontarget`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Deserialize)]
struct TrialRow {
    enroll_id: String,
    test_id: String,
    same_speaker: bool,
    score: f64,
    #[serde(default)]
    beta: Option<f64>,
}

fn beta_key(b: f64) -> i64 {
    (b * 1e9).round() as i64
}

fn from_trials(path: &PathBuf) -> Result<Vec<(f64, EerResult)>> {
    require_file(path, "trials CSV")?;
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    for col in ["enroll_id", "test_id", "same_speaker", "score"] {
        if !headers.iter().any(|h| h == col) {
            bail!("missing column '{col}'");
        }
    }
    let mut groups: BTreeMap<i64, (f64, Vec<TrialScore>)> = BTreeMap::new();
    for (k, row) in rdr.deserialize::<TrialRow>().enumerate() {
        let row = row.with_context(|| format!("line {}", k + 2))?;
        let beta = row.beta.unwrap_or(0.0);
        groups.entry(beta_key(beta)).or_insert_with(|| (beta, Vec::new())).1.push(TrialScore {
            enroll_id: row.enroll_id,
            test_id: row.test_id,
            same_speaker: row.same_speaker,
            score: row.score,
        });
    }
    if groups.is_empty() {
        bail!("no trials in {}", path.display());
    }
    groups
        .into_values()
        .map(|(beta, trials)| Ok((beta, eer(&trials).with_context(|| format!("beta {beta}"))?)))
        .collect()
}

fn from_embeddings(originals: &PathBuf, manipulated: &PathBuf, policy: &PairingPolicy) -> Result<Vec<(f64, EerResult)>> {
    require_file(originals, "originals")?;
    require_file(manipulated, "manipulated")?;
    let orig = read_rows(originals)?
        .into_iter()
        .map(|r| {
            let speaker = r.speaker_id.with_context(|| format!("original '{}' has no speaker_id", r.id))?;
            Ok(EmbeddedUtterance {
                id: r.id,
                speaker,
                embedding: r.embedding,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<i64, (f64, BTreeMap<String, Vec<f64>>)> = BTreeMap::new();
    for r in read_rows(manipulated)? {
        let beta = r.beta.unwrap_or(0.0);
        let map = &mut groups.entry(beta_key(beta)).or_insert_with(|| (beta, BTreeMap::new())).1;
        if map.insert(r.id.clone(), r.embedding).is_some() {
            bail!("duplicate manipulated id '{}' at beta {beta}", r.id);
        }
    }
    if groups.is_empty() {
        bail!("no manipulated embeddings in {}", manipulated.display());
    }
    groups
        .into_values()
        .map(|(beta, map)| {
            let trials = build_trials(&orig, &map, policy)?;
            Ok((beta, eer(&trials).with_context(|| format!("beta {beta}"))?))
        })
        .collect()
}

pub fn run(args: &EerArgs, seed: u64) -> Result<()> {
    let policy = PairingPolicy {
        max_per_class: args.max_per_class,
        seed,
    };
    let curve = match (&args.trials, &args.originals, &args.manipulated) {
        (Some(t), _, _) => from_trials(t)?,
        (None, Some(o), Some(m)) => from_embeddings(o, m, &policy)?,
        _ => bail!("give --trials or both --originals and --manipulated"),
    };
    ensure_parent(&args.out)?;
    write_eer_curve_csv(BufWriter::new(File::create(&args.out)?), &curve)?;
    for (beta, r) in &curve {
        eprintln!("beta {beta}: eer {:.4} ({} target, {} non-target)", r.eer, r.n_target, r.n_nontarget);
    }
    Ok(())
}
