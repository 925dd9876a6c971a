use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use creakbench::creak::Gender;
use creakbench::stats::{creak_pitch_report, pitch_creak_outcome, write_reports_csv, PitchCreakRow};

use crate::{ensure_parent, require_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    /// Male, female and overall rows.
    Gender,
    /// A single overall row.
    None,
}

#[derive(Args, Debug)]
pub struct CorrArgs {
    /// CSV with `mean_pitch` and `creak_prob` columns (and `gender` when grouping).
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = GroupBy::Gender)]
    group_by: GroupBy,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .with_context(|| format!("missing column '{name}'"))
}

fn parse(rec: &csv::StringRecord, idx: usize, line: u64, name: &str) -> Result<f64> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .with_context(|| format!("line {line}: bad {name} '{raw}'"))
}

pub fn run(args: &CorrArgs) -> Result<()> {
    require_file(&args.features, "features CSV")?;
    let mut rdr = csv::Reader::from_path(&args.features)?;
    let headers = rdr.headers()?.clone();
    let pitch_i = column(&headers, "mean_pitch")?;
    let creak_i = column(&headers, "creak_prob")?;
    let gender_i = match args.group_by {
        GroupBy::Gender => Some(column(&headers, "gender")?),
        GroupBy::None => None,
    };

    let mut pairs = Vec::new();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        let pitch = parse(&rec, pitch_i, line, "mean_pitch")?;
        let creak = parse(&rec, creak_i, line, "creak_prob")?;
        if !(0.0..=1.0).contains(&creak) {
            bail!("line {line}: creak_prob {creak} outside [0, 1]");
        }
        pairs.push((pitch, creak));
        if let Some(gi) = gender_i {
            let gender: Gender = rec.get(gi).unwrap_or("").parse().with_context(|| format!("line {line}"))?;
            rows.push(PitchCreakRow {
                gender,
                mean_pitch_hz: pitch,
                creak_prob: creak,
            });
        }
    }
    let outcomes = match args.group_by {
        GroupBy::Gender => creak_pitch_report(&rows),
        GroupBy::None => vec![pitch_creak_outcome("overall", pairs)],
    };
    ensure_parent(&args.out)?;
    write_reports_csv(BufWriter::new(File::create(&args.out)?), &outcomes)?;
    for o in &outcomes {
        if let Some(r) = o.report() {
            eprintln!("{}: n {} R {:.4} slope {:.4e}", r.group, r.n, r.r, r.slope);
        }
    }
    Ok(())
}
