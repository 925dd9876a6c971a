use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use creakbench::acoustics::{extract_features, VoiceFeatures};
use creakbench::adapt::{adapt_corpus, read_manifest, AdaptParams, GenderStats, ManifestRow};
use creakbench::audio::read_wav;
use creakbench::creak::{proxy_creak_prob, CreakCalibration, CreakLabel, CreakSource};
use log::{info, warn};
use rayon::prelude::*;

use crate::{ensure_parent, require_file};

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// JSON Lines manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Features CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Creak proxy calibration file (built-in default otherwise).
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for `manifest.jsonl`, `records.jsonl` and `audio/`.
    #[arg(long)]
    out: PathBuf,
    /// Standard deviation of the pitch jitter, in semitones.
    #[arg(long, default_value_t = 2.0)]
    b: f64,
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Male target mean in Hz (corpus mean otherwise).
    #[arg(long, requires = "female_hz")]
    male_hz: Option<f64>,
    /// Female target mean in Hz (corpus mean otherwise).
    #[arg(long, requires = "male_hz")]
    female_hz: Option<f64>,
}

fn load_calibration(path: Option<&PathBuf>) -> Result<CreakCalibration> {
    match path {
        Some(p) => CreakCalibration::load(p).with_context(|| format!("loading calibration {}", p.display())),
        None => Ok(CreakCalibration::default()),
    }
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn analyze_row(row: &ManifestRow, base: &Path, calib: &CreakCalibration) -> creakbench::Result<(VoiceFeatures, CreakLabel)> {
    let clip = read_wav(row.resolve_audio(base))?;
    let features = extract_features(&clip)?;
    let label = match row.creak_prob {
        Some(p) => CreakLabel::external(p)?,
        None => proxy_creak_prob(&features, calib),
    };
    Ok((features, label))
}

pub fn run_analyze(args: &AnalyzeArgs) -> Result<()> {
    require_file(&args.manifest, "manifest")?;
    let rows = read_manifest(&args.manifest)?;
    let calib = load_calibration(args.calibration.as_ref())?;
    let base = manifest_dir(&args.manifest);
    let results: Vec<_> = rows.par_iter().map(|r| analyze_row(r, &base, &calib)).collect();

    ensure_parent(&args.out)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&args.out)?));
    w.write_record([
        "id",
        "speaker_id",
        "gender",
        "mean_pitch",
        "h1h2_db",
        "hnr_db",
        "cpp_db",
        "jitter_pct",
        "voiced_fraction",
        "creak_prob",
        "creak_source",
    ])?;
    let mut skipped = 0usize;
    for (row, res) in rows.iter().zip(results) {
        match res {
            Ok((f, label)) => {
                let source = match label.source {
                    CreakSource::External => "external",
                    CreakSource::Proxy => "proxy",
                };
                w.write_record([
                    row.id.clone(),
                    row.speaker_id.clone(),
                    row.gender.clone().unwrap_or_default(),
                    f.mean_pitch_hz.to_string(),
                    f.h1h2_db.to_string(),
                    f.hnr_db.to_string(),
                    f.cpp_db.to_string(),
                    f.jitter_pct.to_string(),
                    f.voiced_fraction.to_string(),
                    label.prob.to_string(),
                    source.to_string(),
                ])?;
            }
            Err(e) => {
                warn!("skipping {}: {e}", row.id);
                skipped += 1;
            }
        }
    }
    w.flush()?;
    if skipped > 0 {
        eprintln!("skipped {skipped} of {} rows", rows.len());
    }
    info!("wrote {} rows to {}", rows.len() - skipped, args.out.display());
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_adapt(args: &AdaptArgs, seed: u64) -> Result<()> {
    require_file(&args.manifest, "manifest")?;
    let rows = read_manifest(&args.manifest)?;
    if let Some(r) = rows.iter().find(|r| r.gender.is_none()) {
        bail!("row '{}' has no gender; adaptation needs a gender for every row", r.id);
    }
    for r in &rows {
        r.gender().with_context(|| format!("row '{}'", r.id))?;
    }
    let calib = load_calibration(args.calibration.as_ref())?;
    let stats = match (args.male_hz, args.female_hz) {
        (Some(m), Some(f)) => Some(GenderStats::new(m, f)?),
        _ => None,
    };
    let params = AdaptParams {
        b: args.b,
        global_seed: seed,
        ..AdaptParams::default()
    };
    std::fs::create_dir_all(&args.out)?;
    let outcome = adapt_corpus(&rows, &manifest_dir(&args.manifest), &args.out, stats, &params, &calib)?;
    creakbench::adapt::write_manifest(&args.out.join("manifest.jsonl"), &outcome.rows)?;
    write_jsonl(&args.out.join("records.jsonl"), &outcome.records)?;
    write_jsonl(&args.out.join("skipped.jsonl"), &outcome.skipped)?;
    for s in &outcome.skipped {
        warn!("skipped {}: {}", s.id, s.reason);
    }
    if !outcome.skipped.is_empty() {
        eprintln!("skipped {} of {} rows", outcome.skipped.len(), rows.len());
    }
    info!(
        "adapted {} rows (male {:.1} Hz, female {:.1} Hz)",
        outcome.rows.len(),
        outcome.stats.male_hz,
        outcome.stats.female_hz
    );
    Ok(())
}
