//! Per-gender pitch recentring of a corpus.
//!
//! Every utterance's contour is scaled by one factor `2^((Δ + u·b)/12)`,
//! where `Δ` moves its mean pitch onto the gender mean in semitones and
//! `u ~ N(0, 1)` is drawn once per utterance from a seed derived from the
//! global seed and the utterance id. The clip is resynthesised with PSOLA
//! and relabelled.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustics::extract_features;
use crate::audio::{read_wav, write_wav, AudioClip};
use crate::creak::{proxy_creak_prob, CreakCalibration, Gender};
use crate::error::{Error, Result};
use crate::flow::{ATTR_DIM, CREAK_INDEX};
use crate::pitch::{estimate_contour, mean_pitch, PitchContour, PitchRange};
use crate::psola::shift_pitch;
use crate::vad::detect_speech;

pub const MALE_PRESET_HZ: f64 = 119.0;
pub const FEMALE_PRESET_HZ: f64 = 195.0;
pub const DEFAULT_SPREAD_ST: f64 = 2.0;
const PITCH_ATTR_INDEX: usize = 4;

/// Target mean pitch per gender.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderStats {
    pub male_hz: f64,
    pub female_hz: f64,
}

impl Default for GenderStats {
    fn default() -> Self {
        Self::preset()
    }
}

impl GenderStats {
    /// 119 Hz male, 195 Hz female.
    pub fn preset() -> Self {
        Self {
            male_hz: MALE_PRESET_HZ,
            female_hz: FEMALE_PRESET_HZ,
        }
    }

    pub fn new(male_hz: f64, female_hz: f64) -> Result<Self> {
        let s = Self { male_hz, female_hz };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.male_hz > 0.0 && self.female_hz > 0.0 && self.male_hz.is_finite() && self.female_hz.is_finite()) {
            return Err(Error::invalid("gender mean pitches must be positive"));
        }
        Ok(())
    }

    pub fn mean_for(&self, gender: Gender) -> f64 {
        match gender {
            Gender::Male => self.male_hz,
            Gender::Female => self.female_hz,
        }
    }

    /// Average utterance mean per gender. A gender without data keeps its
    /// preset value.
    pub fn from_means(means: impl IntoIterator<Item = (Gender, f64)>) -> Result<Self> {
        let (mut sum, mut n) = ([0.0; 2], [0usize; 2]);
        for (g, m) in means {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::invalid(format!("invalid mean pitch {m}")));
            }
            let i = g as usize;
            sum[i] += m;
            n[i] += 1;
        }
        let preset = Self::preset();
        let pick = |i: usize, g: Gender| {
            if n[i] == 0 {
                warn!("no {g} utterances; using the {g} preset");
                preset.mean_for(g)
            } else {
                sum[i] / n[i] as f64
            }
        };
        Self::new(pick(0, Gender::Male), pick(1, Gender::Female))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptParams {
    /// Standard deviation of the added jitter, in semitones.
    pub b: f64,
    pub global_seed: u64,
    pub range: PitchRange,
}

impl Default for AdaptParams {
    fn default() -> Self {
        Self {
            b: DEFAULT_SPREAD_ST,
            global_seed: 0,
            range: PitchRange::default(),
        }
    }
}

impl AdaptParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(Error::invalid(format!("b must be non-negative, got {}", self.b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub id: String,
    pub gender: Gender,
    pub delta_semitones: f64,
    pub noise_u: f64,
    pub old_mean_pitch_hz: f64,
    pub new_mean_pitch_hz: f64,
    pub old_creak_prob: f64,
    pub new_creak_prob: f64,
    /// Frames whose requested shift exceeded the PSOLA ratio limits.
    pub clamped_frames: usize,
}

/// `12 · log2(class_mean / utterance_mean)`.
pub fn semitone_delta(class_mean_hz: f64, utterance_mean_hz: f64) -> Result<f64> {
    if !(class_mean_hz > 0.0 && utterance_mean_hz > 0.0 && class_mean_hz.is_finite() && utterance_mean_hz.is_finite())
    {
        return Err(Error::invalid(format!(
            "mean pitches must be positive, got {class_mean_hz} and {utterance_mean_hz}"
        )));
    }
    Ok(12.0 * (class_mean_hz / utterance_mean_hz).log2())
}

/// Scales every voiced frame by `2^((delta + u·b)/12)`.
pub fn adapted_contour(contour: &PitchContour, delta: f64, u: f64, b: f64) -> PitchContour {
    let exponent = delta + u * b;
    if exponent == 0.0 {
        return contour.clone();
    }
    contour.scaled(2f64.powf(exponent / 12.0))
}

/// Seed for one utterance: the first 8 bytes of SHA-256 over the global
/// seed (little-endian) followed by the id.
pub fn utterance_seed(global_seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

/// Contour of the whole clip with non-speech frames unvoiced, and its mean.
pub fn speech_contour(clip: &AudioClip, range: &PitchRange) -> Result<(PitchContour, f64)> {
    let segments = detect_speech(clip);
    if segments.is_empty() {
        return Err(Error::NoSpeech);
    }
    let contour = estimate_contour(clip, range)?.restricted_to(&segments);
    let mean = mean_pitch(&contour)?;
    Ok((contour, mean))
}

/// Recentres one utterance and relabels it with the creak proxy.
pub fn adapt_utterance(
    clip: &AudioClip,
    id: &str,
    gender: Gender,
    stats: &GenderStats,
    params: &AdaptParams,
    calib: &CreakCalibration,
    rng: &mut impl Rng,
) -> Result<(AudioClip, AdaptRecord)> {
    params.validate()?;
    stats.validate()?;
    let (source, old_mean) = speech_contour(clip, &params.range)?;
    let delta = semitone_delta(stats.mean_for(gender), old_mean)?;
    let u: f64 = rng.sample(StandardNormal);
    let target = adapted_contour(&source, delta, u, params.b);
    let shifted = shift_pitch(clip, &source, &target)?;
    let (_, new_mean) = speech_contour(&shifted.clip, &params.range)?;
    let old_creak = proxy_creak_prob(&extract_features(clip)?, calib).prob;
    let new_creak = proxy_creak_prob(&extract_features(&shifted.clip)?, calib).prob;
    let record = AdaptRecord {
        id: id.to_string(),
        gender,
        delta_semitones: delta,
        noise_u: u,
        old_mean_pitch_hz: old_mean,
        new_mean_pitch_hz: new_mean,
        old_creak_prob: old_creak,
        new_creak_prob: new_creak,
        clamped_frames: shifted.clamped_frames,
    };
    Ok((shifted.clip, record))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub audio_path: PathBuf,
    pub speaker_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub creak_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_pitch_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attrs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_semitones: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapted_path: Option<PathBuf>,
}

impl ManifestRow {
    pub fn new(id: &str, audio_path: impl Into<PathBuf>, speaker_id: &str, gender: Option<Gender>) -> Self {
        Self {
            id: id.to_string(),
            audio_path: audio_path.into(),
            speaker_id: speaker_id.to_string(),
            gender: gender.map(|g| g.to_string()),
            creak_prob: None,
            mean_pitch_hz: None,
            attrs: None,
            delta_semitones: None,
            noise_u: None,
            adapted_path: None,
        }
    }

    pub fn gender(&self) -> Result<Gender> {
        self.gender
            .as_deref()
            .ok_or_else(|| Error::invalid("missing gender"))?
            .parse()
    }

    /// `audio_path`, taken relative to `base` unless absolute.
    pub fn resolve_audio(&self, base: &Path) -> PathBuf {
        if self.audio_path.is_absolute() {
            self.audio_path.clone()
        } else {
            base.join(&self.audio_path)
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(p) = self.creak_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("creak_prob {p} outside [0, 1]")));
            }
        }
        if let Some(a) = &self.attrs {
            if a.len() != ATTR_DIM {
                return Err(Error::DimMismatch {
                    expected: ATTR_DIM,
                    got: a.len(),
                });
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        row.validate()
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusOutcome {
    pub stats: GenderStats,
    /// Adapted rows in input order.
    pub rows: Vec<ManifestRow>,
    pub records: Vec<AdaptRecord>,
    pub skipped: Vec<SkippedRow>,
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Adapts every row of a manifest, writing WAVs to `out_dir/audio`.
///
/// Gender means are computed from the rows (manifest `mean_pitch_hz` when
/// present, measured otherwise) unless `stats` is given. Rows with a
/// missing gender, unreadable audio or no voiced speech are skipped.
pub fn adapt_corpus(
    rows: &[ManifestRow],
    base_dir: &Path,
    out_dir: &Path,
    stats: Option<GenderStats>,
    params: &AdaptParams,
    calib: &CreakCalibration,
) -> Result<CorpusOutcome> {
    params.validate()?;
    let mut seen = HashSet::new();
    for r in rows {
        if !seen.insert(file_stem_for(&r.id)) {
            return Err(Error::invalid(format!("duplicate utterance id '{}'", r.id)));
        }
    }
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir)?;

    let stats = match stats {
        Some(s) => {
            s.validate()?;
            s
        }
        None => {
            let means: Vec<Option<(Gender, f64)>> = rows
                .par_iter()
                .map(|r| {
                    let g = r.gender().ok()?;
                    let m = match r.mean_pitch_hz {
                        Some(m) => m,
                        None => {
                            let clip = read_wav(r.resolve_audio(base_dir)).ok()?;
                            speech_contour(&clip, &params.range).ok()?.1
                        }
                    };
                    Some((g, m))
                })
                .collect();
            GenderStats::from_means(means.into_iter().flatten())?
        }
    };
    info!("gender means: male {:.1} Hz, female {:.1} Hz", stats.male_hz, stats.female_hz);

    let results: Vec<Result<(ManifestRow, AdaptRecord)>> = rows
        .par_iter()
        .map(|row| {
            let gender = row.gender()?;
            let clip = read_wav(row.resolve_audio(base_dir))?;
            let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(params.global_seed, &row.id));
            let (out, mut rec) = adapt_utterance(&clip, &row.id, gender, &stats, params, calib, &mut rng)?;
            if let Some(p) = row.creak_prob {
                rec.old_creak_prob = p;
            }
            let path = audio_dir.join(format!("{}.wav", file_stem_for(&row.id)));
            write_wav(&out, &path)?;
            let mut new_row = row.clone();
            new_row.mean_pitch_hz = Some(rec.new_mean_pitch_hz);
            new_row.creak_prob = Some(rec.new_creak_prob);
            if let Some(a) = new_row.attrs.as_mut() {
                a[PITCH_ATTR_INDEX] = rec.new_mean_pitch_hz;
                a[CREAK_INDEX] = rec.new_creak_prob;
            }
            new_row.delta_semitones = Some(rec.delta_semitones);
            new_row.noise_u = Some(rec.noise_u);
            new_row.adapted_path = Some(path);
            Ok((new_row, rec))
        })
        .collect();

    let mut outcome = CorpusOutcome {
        stats,
        rows: Vec::new(),
        records: Vec::new(),
        skipped: Vec::new(),
    };
    for (row, res) in rows.iter().zip(results) {
        match res {
            Ok((r, rec)) => {
                outcome.rows.push(r);
                outcome.records.push(rec);
            }
            Err(e) => {
                warn!("skipping {}: {e}", row.id);
                outcome.skipped.push(SkippedRow {
                    id: row.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_glottal, GlottalSpec};

    const SR: u32 = 16_000;

    fn vowel(f0: f64, seed: u64) -> AudioClip {
        synth_glottal(&GlottalSpec::modal(f0), 1.0, SR, seed).unwrap()
    }

    #[test]
    fn semitone_examples() {
        assert!((semitone_delta(119.0, 238.0).unwrap() + 12.0).abs() < 1e-12);
        assert_eq!(semitone_delta(195.0, 195.0).unwrap(), 0.0);
        let want = 12.0 * 1.19f64.ln() / 2f64.ln();
        assert!((semitone_delta(119.0, 100.0).unwrap() - want).abs() < 1e-12);
        assert!((want - 3.014).abs() < 0.005);
        assert!(semitone_delta(0.0, 100.0).is_err());
        assert!(semitone_delta(100.0, -1.0).is_err());
    }

    #[test]
    fn contour_scaling() {
        let c = PitchContour::new(0.01, 0.04, vec![0.0, 100.0, 150.0, 0.0]);
        assert_eq!(adapted_contour(&c, 0.0, 0.0, 2.0), c);
        assert_eq!(adapted_contour(&c, 12.0, 0.0, 2.0).f0_hz, vec![0.0, 200.0, 300.0, 0.0]);
        let up = adapted_contour(&c, 0.0, 1.0, 2.0);
        assert!((up.f0_hz[1] / 100.0 - 1.122_462).abs() < 1e-6);
        assert_eq!(up.f0_hz[3], 0.0);
    }

    #[test]
    fn seeds_depend_on_id_and_global_seed() {
        assert_eq!(utterance_seed(1, "a"), utterance_seed(1, "a"));
        assert_ne!(utterance_seed(1, "a"), utterance_seed(1, "b"));
        assert_ne!(utterance_seed(1, "a"), utterance_seed(2, "a"));
    }

    fn run(clip: &AudioClip, gender: Gender, b: f64, seed: u64) -> (AudioClip, AdaptRecord) {
        let params = AdaptParams {
            b,
            global_seed: seed,
            ..AdaptParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        adapt_utterance(clip, "u", gender, &GenderStats::preset(), &params, &CreakCalibration::default(), &mut rng).unwrap()
    }

    #[test]
    fn centred_utterance_is_unchanged() {
        let (_, rec) = run(&vowel(119.0, 1), Gender::Male, 0.0, 0);
        assert!(rec.delta_semitones.abs() < 0.1, "{}", rec.delta_semitones);
        assert!((rec.new_mean_pitch_hz / rec.old_mean_pitch_hz - 1.0).abs() < 0.01);
    }

    #[test]
    fn octave_down_to_male_mean() {
        let (out, rec) = run(&vowel(238.0, 2), Gender::Male, 0.0, 0);
        assert!((115.4..=122.6).contains(&rec.new_mean_pitch_hz), "{}", rec.new_mean_pitch_hz);
        assert!((rec.delta_semitones + 12.0).abs() < 0.2);
        assert_eq!(out.len(), SR as usize);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let clip = vowel(150.0, 3);
        let a = run(&clip, Gender::Female, 2.0, 5);
        let b = run(&clip, Gender::Female, 2.0, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn silent_clip_is_rejected() {
        let clip = AudioClip::new(vec![0.0; 8000], SR).unwrap();
        let params = AdaptParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let res = adapt_utterance(&clip, "s", Gender::Male, &GenderStats::preset(), &params, &CreakCalibration::default(), &mut rng);
        assert!(matches!(res, Err(Error::NoSpeech)));
    }

    #[test]
    fn stats_from_means() {
        let s = GenderStats::from_means([(Gender::Male, 100.0), (Gender::Male, 120.0), (Gender::Female, 200.0)]).unwrap();
        assert_eq!((s.male_hz, s.female_hz), (110.0, 200.0));
        let only_male = GenderStats::from_means([(Gender::Male, 100.0)]).unwrap();
        assert_eq!(only_male.female_hz, FEMALE_PRESET_HZ);
        assert!(GenderStats::new(-1.0, 200.0).is_err());
    }

    #[test]
    fn manifest_round_trip_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        write_wav(&vowel(140.0, 4), &wav).unwrap();
        let mut a = ManifestRow::new("a", "a.wav", "spk1", Some(Gender::Male));
        a.attrs = Some(vec![0.0; ATTR_DIM]);
        a.creak_prob = Some(0.7);
        let rows = vec![
            a,
            ManifestRow::new("nogender", "a.wav", "spk1", None),
            ManifestRow::new("missing", "nope.wav", "spk2", Some(Gender::Female)),
        ];
        let manifest = dir.path().join("in.jsonl");
        write_manifest(&manifest, &rows).unwrap();
        let back = read_manifest(&manifest).unwrap();
        assert_eq!(back, rows);

        let out = adapt_corpus(&back, dir.path(), &dir.path().join("out"), None, &AdaptParams::default(), &CreakCalibration::default()).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.skipped.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["nogender", "missing"]);
        let r = &out.rows[0];
        assert!(r.adapted_path.as_ref().unwrap().exists());
        assert_eq!(r.attrs.as_ref().unwrap()[CREAK_INDEX], r.creak_prob.unwrap());
        assert_eq!(out.records[0].old_creak_prob, 0.7);
        assert!(r.delta_semitones.is_some() && r.noise_u.is_some());
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = adapt_corpus(&[], dir.path(), dir.path(), None, &AdaptParams::default(), &CreakCalibration::default()).unwrap();
        assert!(out.rows.is_empty() && out.skipped.is_empty());
        assert_eq!(out.stats, GenderStats::preset());
    }

    #[test]
    fn bad_manifest_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{\"id\":\"a\",\"audio_path\":\"x.wav\",\"speaker_id\":\"s\"}\n{oops\n").unwrap();
        let err = read_manifest(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
