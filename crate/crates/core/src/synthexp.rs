//! Synthetic speaker-embedding experiment: flows trained on correlated and
//! on decorrelated creak/pitch data, compared on identity preservation and
//! pitch leakage under creak shifts.
//!
//! Embeddings are a known linear mix of latent factors, so the pitch of a
//! manipulated embedding can be read back exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::flow::{train, AttributeVector, FlowModel, SolverConfig, TraceMethod, TrainHyper};
use crate::stats::{metric_slope_vs_beta, pearson_r, MetricRecord};
use crate::verify::{build_trials, eer, EmbeddedUtterance, PairingPolicy};

/// Creak shifts evaluated by default: -1.25 to 1.25 in steps of 0.25.
pub const BETA_GRID: [f64; 11] = [-1.25, -1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25];
pub const SYSTEMS: [&str; 3] = ["base", "adapted", "combined"];
const MAX_CONDITION: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub d: usize,
    /// Correlation between the creak and pitch latents across speakers.
    pub creak_pitch_correlation: f64,
    /// Within-speaker noise on the nuisance factors.
    pub noise_sigma: f64,
    /// Gain of the pitch factor in the mixing matrix.
    pub pitch_gain: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 200,
            utterances_per_speaker: 5,
            d: 8,
            creak_pitch_correlation: -0.7,
            noise_sigma: 0.05,
            pitch_gain: 2.5,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let rho = self.creak_pitch_correlation;
        if !(rho.abs() < 1.0) {
            return Err(Error::invalid(format!("correlation must lie in (-1, 1), got {rho}")));
        }
        if self.d < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        if self.n_speakers < 2 || self.utterances_per_speaker == 0 {
            return Err(Error::invalid("need at least two speakers and one utterance each"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and non-negative"));
        }
        let g = self.pitch_gain;
        if !(g > 0.0 && g.max(1.0 / g) < MAX_CONDITION) {
            return Err(Error::invalid(format!("pitch gain {g} makes the mixing matrix ill-conditioned")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUtterance {
    pub id: String,
    pub speaker: String,
    pub pitch: f64,
    /// Creak probability, the standard normal CDF of `creak_latent`.
    pub creak: f64,
    pub creak_latent: f64,
    pub nuisance: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl SyntheticUtterance {
    /// Creak-only conditioning attributes.
    pub fn attributes(&self) -> AttributeVector {
        AttributeVector::creak_only(self.creak)
    }

    fn latent(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.nuisance.len() + 2);
        v.push(self.pitch);
        v.push(self.creak_latent);
        v.extend_from_slice(&self.nuisance);
        DVector::from_vec(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub mixing: DMatrix<f64>,
    pub offsets: BTreeMap<String, Vec<f64>>,
    pub utterances: Vec<SyntheticUtterance>,
}

impl SyntheticCorpus {
    fn embed(&self, u: &SyntheticUtterance) -> Vec<f64> {
        let e = &self.mixing * u.latent();
        e.iter().zip(&self.offsets[&u.speaker]).map(|(a, b)| a + b).collect()
    }

    /// Pearson R between creak probability and pitch over all utterances.
    pub fn creak_pitch_r(&self) -> Result<f64> {
        let p: Vec<f64> = self.utterances.iter().map(|u| u.pitch).collect();
        let c: Vec<f64> = self.utterances.iter().map(|u| u.creak).collect();
        pearson_r(&p, &c)
    }

    /// `(embedding, attributes)` pairs.
    pub fn training_pairs(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.utterances
            .iter()
            .map(|u| (u.embedding.clone(), u.attributes().to_vec()))
            .collect()
    }

    fn restrict(&self, speakers: &BTreeSet<String>) -> Self {
        Self {
            mixing: self.mixing.clone(),
            offsets: self.offsets.iter().filter(|(s, _)| speakers.contains(*s)).map(|(s, o)| (s.clone(), o.clone())).collect(),
            utterances: self.utterances.iter().filter(|u| speakers.contains(&u.speaker)).cloned().collect(),
        }
    }
}

/// Random orthogonal matrix with its first column scaled by `pitch_gain`.
fn mixing_matrix(d: usize, pitch_gain: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.column_mut(0).scale_mut(pitch_gain);
    q
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Draws a corpus. Pitch and creak latents are per speaker and coupled
/// through a Gaussian copula; nuisance factors vary per utterance.
pub fn generate_corpus(spec: &SyntheticCorpusSpec, rng: &mut impl Rng) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let d = spec.d;
    let mixing = mixing_matrix(d, spec.pitch_gain, rng);
    let rho = spec.creak_pitch_correlation;
    let phi = std_normal();
    let width = (spec.n_speakers - 1).to_string().len();
    let mut offsets = BTreeMap::new();
    let mut utterances = Vec::with_capacity(spec.n_speakers * spec.utterances_per_speaker);
    for s in 0..spec.n_speakers {
        let speaker = format!("spk{s:0width$}");
        let pitch: f64 = rng.sample(StandardNormal);
        let eps: f64 = rng.sample(StandardNormal);
        let creak_latent = rho * pitch + (1.0 - rho * rho).sqrt() * eps;
        let base: Vec<f64> = (0..d - 2).map(|_| rng.sample(StandardNormal)).collect();
        let offset: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        offsets.insert(speaker.clone(), offset);
        for k in 0..spec.utterances_per_speaker {
            let nuisance = base
                .iter()
                .map(|b| b + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            utterances.push(SyntheticUtterance {
                id: format!("{speaker}-{k}"),
                speaker: speaker.clone(),
                pitch,
                creak: phi.cdf(creak_latent),
                creak_latent,
                nuisance,
                embedding: Vec::new(),
            });
        }
    }
    let mut corpus = SyntheticCorpus { mixing, offsets, utterances };
    for i in 0..corpus.utterances.len() {
        corpus.utterances[i].embedding = corpus.embed(&corpus.utterances[i]);
    }
    Ok(corpus)
}

/// Replaces every pitch latent with the population mean plus Gaussian noise
/// of standard deviation `b / 12`, then re-embeds. Creak is untouched.
pub fn decorrelate_corpus(corpus: &SyntheticCorpus, b: f64, rng: &mut impl Rng) -> Result<SyntheticCorpus> {
    if !(b >= 0.0 && b.is_finite()) {
        return Err(Error::invalid(format!("noise scale b must be finite and non-negative, got {b}")));
    }
    if corpus.utterances.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mean = corpus.utterances.iter().map(|u| u.pitch).sum::<f64>() / corpus.utterances.len() as f64;
    let mut out = corpus.clone();
    for i in 0..out.utterances.len() {
        let u: f64 = rng.sample(StandardNormal);
        out.utterances[i].pitch = mean + b / 12.0 * u;
        out.utterances[i].embedding = out.embed(&out.utterances[i]);
    }
    Ok(out)
}

/// Pitch latent of `embedding`: first coordinate of W⁻¹ (embedding − offset).
pub fn implied_pitch(embedding: &[f64], offset: &[f64], mixing: &DMatrix<f64>) -> Result<f64> {
    let d = mixing.nrows();
    if mixing.ncols() != d {
        return Err(Error::invalid("mixing matrix must be square"));
    }
    for len in [embedding.len(), offset.len()] {
        if len != d {
            return Err(Error::DimMismatch { expected: d, got: len });
        }
    }
    let rhs = DVector::from_iterator(d, embedding.iter().zip(offset).map(|(e, o)| e - o));
    mixing
        .clone()
        .lu()
        .solve(&rhs)
        .map(|x| x[0])
        .ok_or_else(|| Error::invalid("mixing matrix is singular"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: SyntheticCorpusSpec,
    pub hyper: TrainHyper,
    pub solver: SolverConfig,
    /// Pitch noise scale used when decorrelating.
    pub b: f64,
    pub betas: Vec<f64>,
    pub test_fraction: f64,
    pub pairing: PairingPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: SyntheticCorpusSpec::default(),
            hyper: TrainHyper {
                batch_size: 200,
                learning_rate: 5e-3,
                epochs: 100,
                seed: 0,
                hidden: 32,
                hidden_layers: 2,
                trace: TraceMethod::Exact,
            },
            solver: SolverConfig::rk4(8),
            b: 2.0,
            betas: BETA_GRID.to_vec(),
            test_fraction: 0.2,
            pairing: PairingPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SystemStatus {
    Trained,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaPoint {
    pub beta: f64,
    pub eer: f64,
    pub threshold: f64,
    /// Mean change of the implied pitch latent.
    pub mean_pitch_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    pub status: SystemStatus,
    pub n_train: usize,
    pub epoch_nll: Vec<f64>,
    pub points: Vec<BetaPoint>,
    /// Slope of implied-pitch change against beta.
    pub pitch_slope: Option<f64>,
    pub pitch_r: Option<f64>,
}

impl SystemReport {
    pub fn trained(&self) -> bool {
        self.status == SystemStatus::Trained
    }

    pub fn eer_at(&self, beta: f64) -> Option<f64> {
        self.points.iter().find(|p| (p.beta - beta).abs() < 1e-9).map(|p| p.eer)
    }
}

/// Qualitative comparisons between the three systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternChecks {
    /// Adapted EER below base EER at every |beta| >= 0.75.
    pub adapted_below_base: bool,
    /// Smallest base/adapted EER ratio at the extreme betas.
    pub extreme_ratio: Option<f64>,
    /// Combined EER within a factor two of adapted at every beta.
    pub combined_tracks_adapted: bool,
    /// |base slope| / |adapted slope|; `None` when the adapted slope is zero.
    pub slope_ratio: Option<f64>,
    /// Per system: EER non-decreasing in |beta| with at most one inversion.
    pub monotone: BTreeMap<String, bool>,
    pub paper_pattern: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub corpus_r_original: f64,
    pub corpus_r_adapted: f64,
    pub n_test_utterances: usize,
    pub systems: Vec<SystemReport>,
    pub checks: PatternChecks,
}

impl ExperimentReport {
    pub fn system(&self, name: &str) -> Option<&SystemReport> {
        self.systems.iter().find(|s| s.system == name)
    }

    pub fn all_trained(&self) -> bool {
        self.systems.iter().all(SystemReport::trained)
    }
}

fn split_speakers(corpus: &SyntheticCorpus, test_fraction: f64, rng: &mut impl Rng) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut speakers: Vec<String> = corpus.offsets.keys().cloned().collect();
    speakers.shuffle(rng);
    let n_test = ((speakers.len() as f64 * test_fraction).round() as usize).clamp(1, speakers.len() - 1);
    let test = speakers[..n_test].iter().cloned().collect();
    let train = speakers[n_test..].iter().cloned().collect();
    Ok((train, test))
}

fn evaluate(
    model: &FlowModel,
    test: &SyntheticCorpus,
    betas: &[f64],
    pairing: &PairingPolicy,
) -> Result<(Vec<BetaPoint>, Vec<MetricRecord>)> {
    let originals: Vec<EmbeddedUtterance> = test
        .utterances
        .iter()
        .map(|u| EmbeddedUtterance {
            id: u.id.clone(),
            speaker: u.speaker.clone(),
            embedding: u.embedding.clone(),
        })
        .collect();
    let s: Vec<Vec<f64>> = test.utterances.iter().map(|u| u.embedding.clone()).collect();
    let a: Vec<AttributeVector> = test.utterances.iter().map(SyntheticUtterance::attributes).collect();
    let a_vec: Vec<Vec<f64>> = a.iter().map(AttributeVector::to_vec).collect();

    let per_beta: Vec<Result<(BetaPoint, Vec<MetricRecord>)>> = betas
        .par_iter()
        .map(|&beta| {
            let shifted: Vec<Vec<f64>> = a.iter().map(|v| v.shift_creak(beta).to_vec()).collect();
            let out = model.manipulate_batch(&s, &a_vec, &shifted)?;
            let mut records = Vec::with_capacity(out.len());
            let mut manipulated = BTreeMap::new();
            for (u, m) in test.utterances.iter().zip(out) {
                let offset = &test.offsets[&u.speaker];
                let delta = implied_pitch(&m, offset, &test.mixing)? - implied_pitch(&u.embedding, offset, &test.mixing)?;
                records.push(MetricRecord {
                    metric: "pitch".into(),
                    beta,
                    delta,
                });
                manipulated.insert(u.id.clone(), m);
            }
            let trials = build_trials(&originals, &manipulated, pairing)?;
            let res = eer(&trials)?;
            let mean_pitch_delta = records.iter().map(|r| r.delta).sum::<f64>() / records.len() as f64;
            Ok((
                BetaPoint {
                    beta,
                    eer: res.eer,
                    threshold: res.threshold,
                    mean_pitch_delta,
                },
                records,
            ))
        })
        .collect();
    let mut points = Vec::with_capacity(betas.len());
    let mut records = Vec::new();
    for r in per_beta {
        let (p, recs) = r?;
        points.push(p);
        records.extend(recs);
    }
    Ok((points, records))
}

fn run_system(
    name: &str,
    data: &[(Vec<f64>, Vec<f64>)],
    test: &SyntheticCorpus,
    cfg: &ExperimentConfig,
) -> Result<SystemReport> {
    info!("training {name} flow on {} samples", data.len());
    let mut report = SystemReport {
        system: name.to_string(),
        status: SystemStatus::Trained,
        n_train: data.len(),
        epoch_nll: Vec::new(),
        points: Vec::new(),
        pitch_slope: None,
        pitch_r: None,
    };
    let outcome = match train(data, &cfg.hyper, &cfg.solver) {
        Ok(o) => o,
        Err(e) if e.is_numerical() => {
            warn!("{name} flow failed: {e}");
            report.status = SystemStatus::Failed { reason: e.to_string() };
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    report.epoch_nll = outcome.epoch_nll;
    let (points, records) = match evaluate(&outcome.model, test, &cfg.betas, &cfg.pairing) {
        Ok(v) => v,
        Err(e) if e.is_numerical() => {
            warn!("{name} flow failed during evaluation: {e}");
            report.status = SystemStatus::Failed { reason: e.to_string() };
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    report.points = points;
    if let Ok(slopes) = metric_slope_vs_beta(&records) {
        if let Some(m) = slopes.into_iter().find(|m| m.metric == "pitch") {
            report.pitch_slope = Some(m.slope);
            report.pitch_r = m.r;
        }
    }
    Ok(report)
}

fn monotone_in_abs_beta(points: &[BetaPoint]) -> bool {
    let side = |neg: bool| -> Vec<f64> {
        let mut v: Vec<&BetaPoint> = points.iter().filter(|p| if neg { p.beta <= 0.0 } else { p.beta >= 0.0 }).collect();
        v.sort_by(|a, b| a.beta.abs().total_cmp(&b.beta.abs()));
        v.into_iter().map(|p| p.eer).collect()
    };
    let inversions: usize = [side(true), side(false)]
        .iter()
        .map(|s| s.windows(2).filter(|w| w[1] < w[0]).count())
        .sum();
    inversions <= 1
}

/// Evaluates the qualitative pattern: decorrelated training keeps identity
/// better at large shifts and leaks less pitch.
pub fn pattern_checks(systems: &[SystemReport], betas: &[f64]) -> PatternChecks {
    let get = |n: &str| systems.iter().find(|s| s.system == n && s.trained());
    let monotone = systems
        .iter()
        .filter(|s| s.trained())
        .map(|s| (s.system.clone(), monotone_in_abs_beta(&s.points)))
        .collect();
    let (base, adapted, combined) = match (get("base"), get("adapted"), get("combined")) {
        (Some(b), Some(a), Some(c)) => (b, a, c),
        _ => {
            return PatternChecks {
                adapted_below_base: false,
                extreme_ratio: None,
                combined_tracks_adapted: false,
                slope_ratio: None,
                monotone,
                paper_pattern: false,
            }
        }
    };
    let pairs = |x: &SystemReport, y: &SystemReport, keep: &dyn Fn(f64) -> bool| -> Vec<(f64, f64)> {
        betas
            .iter()
            .filter(|&&b| keep(b))
            .filter_map(|&b| Some((x.eer_at(b)?, y.eer_at(b)?)))
            .collect()
    };
    let large = pairs(adapted, base, &|b: f64| b.abs() >= 0.75 - 1e-9);
    let adapted_below_base = !large.is_empty() && large.iter().all(|(a, b)| a < b);
    let max_abs = betas.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    let extreme_ratio = pairs(adapted, base, &|b: f64| (b.abs() - max_abs).abs() < 1e-9)
        .iter()
        .map(|(a, b)| if *a > 0.0 { b / a } else if *b > 0.0 { f64::INFINITY } else { 1.0 })
        .reduce(f64::min);
    let tracks = pairs(combined, adapted, &|_| true);
    let combined_tracks_adapted = !tracks.is_empty()
        && tracks.iter().all(|(c, a)| {
            let (lo, hi) = if c < a { (*c, *a) } else { (*a, *c) };
            hi <= 2.0 * lo || hi == 0.0
        });
    let slope_ratio = match (base.pitch_slope, adapted.pitch_slope) {
        (Some(b), Some(a)) if a != 0.0 => Some(b.abs() / a.abs()),
        _ => None,
    };
    let paper_pattern = adapted_below_base
        && extreme_ratio.is_some_and(|r| r >= 2.0)
        && combined_tracks_adapted
        && slope_ratio.is_some_and(|r| r >= 3.0);
    PatternChecks {
        adapted_below_base,
        extreme_ratio,
        combined_tracks_adapted,
        slope_ratio,
        monotone,
        paper_pattern,
    }
}

/// Generates, decorrelates and splits a corpus, trains the base, adapted
/// and combined flows, and evaluates each on the original test speakers.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.betas.is_empty() || cfg.betas.iter().any(|b| !b.is_finite()) {
        return Err(Error::invalid("beta grid must be non-empty and finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.corpus.seed);
    let original = generate_corpus(&cfg.corpus, &mut rng)?;
    let adapted = decorrelate_corpus(&original, cfg.b, &mut rng)?;
    let (train_spk, test_spk) = split_speakers(&original, cfg.test_fraction, &mut rng)?;
    let test = original.restrict(&test_spk);
    let base_data = original.restrict(&train_spk).training_pairs();
    let adapted_data = adapted.restrict(&train_spk).training_pairs();
    let combined_data: Vec<_> = base_data.iter().chain(&adapted_data).cloned().collect();

    let mut systems = Vec::with_capacity(3);
    for (name, data) in SYSTEMS.iter().zip([&base_data, &adapted_data, &combined_data]) {
        systems.push(run_system(name, data, &test, cfg)?);
    }
    let checks = pattern_checks(&systems, &cfg.betas);
    Ok(ExperimentReport {
        config: cfg.clone(),
        corpus_r_original: original.creak_pitch_r()?,
        corpus_r_adapted: adapted.creak_pitch_r()?,
        n_test_utterances: test.utterances.len(),
        systems,
        checks,
    })
}

/// One row per system and beta: `system,beta,eer,pitch_slope`. Failed
/// systems leave the numeric columns empty.
pub fn write_report_csv<W: Write>(out: W, report: &ExperimentReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["system", "beta", "eer", "pitch_slope"]).map_err(err)?;
    for sys in &report.systems {
        let slope = sys.pitch_slope.map(|s| s.to_string()).unwrap_or_default();
        for &beta in &report.config.betas {
            let eer = sys.eer_at(beta).map(|e| e.to_string()).unwrap_or_default();
            w.write_record([sys.system.as_str(), &beta.to_string(), &eer, &slope]).map_err(err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    paper_pattern: bool,
    #[serde(flatten)]
    report: &'a ExperimentReport,
}

/// Pretty JSON of the report with `paper_pattern` repeated at the top level.
pub fn write_summary_json<W: Write>(out: W, report: &ExperimentReport) -> Result<()> {
    let mut out = out;
    let summary = Summary {
        paper_pattern: report.checks.paper_pattern,
        report,
    };
    serde_json::to_writer_pretty(&mut out, &summary)?;
    out.write_all(b"\n")?;
    Ok(())
}
