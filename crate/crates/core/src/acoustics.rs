//! Voice-quality correlates of creak: mean pitch, H1-H2, HNR, CPP and
//! period jitter.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{hann, AudioClip};
use crate::error::{Error, Result};
use crate::pitch::{estimate_contour, mean_pitch, PitchContour, PitchRange};
use crate::psola::mark_epochs;
use crate::vad::{apply_segments, detect_speech};

pub const HNR_MIN_DB: f64 = -10.0;
pub const HNR_MAX_DB: f64 = 60.0;

/// Utterance-level voice-quality measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoiceFeatures {
    pub mean_pitch_hz: f64,
    pub h1h2_db: f64,
    pub hnr_db: f64,
    pub cpp_db: f64,
    pub voiced_fraction: f64,
    /// Local period jitter in percent.
    pub jitter_pct: f64,
}

impl VoiceFeatures {
    pub fn is_finite(&self) -> bool {
        [
            self.mean_pitch_hz,
            self.h1h2_db,
            self.hnr_db,
            self.cpp_db,
            self.voiced_fraction,
            self.jitter_pct,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Cepstral peak prominence settings. Quefrencies in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CppConfig {
    pub frame_s: f64,
    pub hop_s: f64,
    pub fft_len: usize,
    pub search_band_s: (f64, f64),
    pub regression_band_s: (f64, f64),
    /// Moving-average length across frames applied to the cepstra.
    pub time_smoothing_frames: usize,
    /// Moving-average length along quefrency, in bins.
    pub quefrency_smoothing_bins: usize,
}

impl Default for CppConfig {
    fn default() -> Self {
        Self {
            frame_s: 0.040,
            hop_s: 0.010,
            fft_len: 1024,
            search_band_s: (1.0 / 500.0, 1.0 / 60.0),
            regression_band_s: (0.001, 0.016),
            time_smoothing_frames: 7,
            quefrency_smoothing_bins: 5,
        }
    }
}

struct Transform {
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
}

impl Transform {
    fn new(len: usize) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(len),
            buf: vec![Complex::default(); len],
        }
    }

    /// Power spectrum of zero-padded `x`.
    fn power(&mut self, x: &[f64]) -> Vec<f64> {
        self.buf.iter_mut().for_each(|c| *c = Complex::default());
        for (c, &v) in self.buf.iter_mut().zip(x) {
            c.re = v;
        }
        self.fft.process(&mut self.buf);
        self.buf.iter().map(|c| c.norm_sqr()).collect()
    }
}

fn voiced_frames(contour: &PitchContour) -> impl Iterator<Item = (f64, f64)> + '_ {
    contour
        .f0_hz
        .iter()
        .enumerate()
        .filter(|(_, &f)| f > 0.0)
        .map(|(i, &f)| (contour.frame_time(i), f))
}

/// Start index of a `len`-sample window centred at `centre`, shifted to fit
/// inside `n` samples. `None` when the clip is shorter than the window.
fn fit_window(centre: f64, len: usize, n: usize) -> Option<usize> {
    if len > n {
        return None;
    }
    let start = (centre - len as f64 / 2.0).round().max(0.0) as usize;
    Some(start.min(n - len))
}

fn parabolic_offset(a: f64, b: f64, c: f64) -> (f64, f64) {
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-300 {
        return (0.0, b);
    }
    let p = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
    (p, b - 0.25 * (a - c) * p)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean level difference in dB between the first two harmonics over the
/// voiced frames of `contour`.
pub fn h1_h2(clip: &AudioClip, contour: &PitchContour) -> Result<f64> {
    let sr = clip.sample_rate_hz() as f64;
    let x = clip.samples();
    let base_len = (contour.frame_len_s * sr).round() as usize;
    let mut transforms: Vec<(usize, Transform)> = Vec::new();
    let mut diffs = Vec::new();
    for (t, f0) in voiced_frames(contour) {
        let want = base_len.max((4.0 * sr / f0).ceil() as usize);
        let len = want.min(x.len());
        let Some(start) = fit_window(t * sr, len, x.len()) else {
            continue;
        };
        let nfft = 4 * len.next_power_of_two();
        if 2.0 * f0 >= sr / 2.0 {
            continue;
        }
        let idx = match transforms.iter().position(|(n, _)| *n == nfft) {
            Some(i) => i,
            None => {
                transforms.push((nfft, Transform::new(nfft)));
                transforms.len() - 1
            }
        };
        let w = hann(len);
        let frame: Vec<f64> = x[start..start + len].iter().zip(&w).map(|(a, b)| a * b).collect();
        let power = transforms[idx].1.power(&frame);
        let peak = power[..nfft / 2].iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            continue;
        }
        let db: Vec<f64> = power[..nfft / 2]
            .iter()
            .map(|p| 10.0 * (p + 1e-12 * peak).log10())
            .collect();
        let level = |k: f64| {
            let centre = k * f0 * nfft as f64 / sr;
            let lo = ((centre - 1.5).ceil().max(1.0)) as usize;
            let hi = ((centre + 1.5).floor() as usize).min(db.len() - 2);
            let m = (lo..=hi).max_by(|&a, &b| db[a].total_cmp(&db[b]))?;
            Some(parabolic_offset(db[m - 1], db[m], db[m + 1]).1)
        };
        if let (Some(h1), Some(h2)) = (level(1.0), level(2.0)) {
            diffs.push(h1 - h2);
        }
    }
    mean(&diffs).ok_or(Error::Unvoiced)
}

/// Mean harmonics-to-noise ratio in dB over voiced frames, from the peak of
/// the normalised cross-correlation near the local period.
pub fn hnr(clip: &AudioClip, contour: &PitchContour) -> Result<f64> {
    let sr = clip.sample_rate_hz() as f64;
    let x = clip.samples();
    let base_len = (contour.frame_len_s * sr).round() as usize;
    let mut values = Vec::new();
    for (t, f0) in voiced_frames(contour) {
        let period = sr / f0;
        let lag_lo = (0.9 * period).floor().max(1.0) as usize;
        let lag_hi = (1.1 * period).ceil() as usize;
        let len = base_len.max((3.0 * period).ceil() as usize);
        let Some(start) = fit_window(t * sr, len + lag_hi + 1, x.len()) else {
            continue;
        };
        let a = &x[start..start + len];
        let ea: f64 = a.iter().map(|v| v * v).sum();
        if ea <= 0.0 {
            continue;
        }
        let r: Vec<f64> = (lag_lo - 1..=lag_hi + 1)
            .map(|lag| {
                let b = &x[start + lag..start + lag + len];
                let eb: f64 = b.iter().map(|v| v * v).sum();
                let ab: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                if eb > 0.0 {
                    ab / (ea * eb).sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let m = (1..r.len() - 1).max_by(|&i, &j| r[i].total_cmp(&r[j])).unwrap_or(1);
        let peak = parabolic_offset(r[m - 1], r[m], r[m + 1]).1.max(r[m]).min(1.0);
        let db = if peak >= 1.0 {
            HNR_MAX_DB
        } else if peak <= 0.0 {
            HNR_MIN_DB
        } else {
            10.0 * (peak / (1.0 - peak)).log10()
        };
        values.push(db.clamp(HNR_MIN_DB, HNR_MAX_DB));
    }
    mean(&values).ok_or(Error::Unvoiced)
}

/// Smoothed cepstral peak prominence with voicing from the pitch estimator.
pub fn cpp(clip: &AudioClip) -> Result<f64> {
    let contour = estimate_contour(clip, &PitchRange::default())?;
    cpp_with(clip, Some(&contour), &CppConfig::default())
}

/// Cepstral peak prominence averaged over the frames that `contour` marks
/// voiced, or over all frames when there are none (or no contour).
pub fn cpp_with(clip: &AudioClip, contour: Option<&PitchContour>, cfg: &CppConfig) -> Result<f64> {
    let sr = clip.sample_rate_hz() as f64;
    let x = clip.samples();
    let len = (cfg.frame_s * sr).round() as usize;
    let hop = ((cfg.hop_s * sr).round() as usize).max(1);
    let nfft = cfg.fft_len.max(len.next_power_of_two());
    if x.len() < len || len < 2 {
        return Err(Error::invalid(format!(
            "clip of {} samples shorter than the {len}-sample CPP frame",
            x.len()
        )));
    }
    let n_frames = crate::audio::frame_count(x.len(), len, hop);
    let w = hann(len);
    let mut tf = Transform::new(nfft);
    let half = nfft / 2;
    let mut cepstra: Vec<Vec<f64>> = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let frame: Vec<f64> = x[k * hop..k * hop + len].iter().zip(&w).map(|(a, b)| a * b).collect();
        let power = tf.power(&frame);
        let peak = power.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            cepstra.push(vec![0.0; half]);
            continue;
        }
        let log_spec: Vec<f64> = power.iter().map(|p| 10.0 * (p + 1e-10 * peak).log10()).collect();
        let c = tf.power(&log_spec);
        cepstra.push(c[..half].iter().map(|v| 10.0 * (v + 1e-30).log10()).collect());
    }
    let cepstra = smooth_rows(&cepstra, cfg.time_smoothing_frames, cfg.quefrency_smoothing_bins);

    let bin = |s: f64| (s * sr).round() as usize;
    let (s_lo, s_hi) = (bin(cfg.search_band_s.0), bin(cfg.search_band_s.1).min(half - 1));
    let (r_lo, r_hi) = (bin(cfg.regression_band_s.0), bin(cfg.regression_band_s.1).min(half - 1));
    let frame_voiced = |k: usize| {
        contour.is_some_and(|c| c.value_at((k * hop) as f64 / sr + cfg.frame_s / 2.0) > 0.0)
    };
    let any_voiced = (0..n_frames).any(frame_voiced);
    let mut values = Vec::new();
    for (k, c) in cepstra.iter().enumerate() {
        if any_voiced && !frame_voiced(k) {
            continue;
        }
        let (slope, intercept) = line_fit(r_lo, r_hi, c);
        let j = (s_lo..=s_hi).max_by(|&a, &b| c[a].total_cmp(&c[b])).unwrap_or(s_lo);
        values.push(c[j] - (intercept + slope * j as f64));
    }
    mean(&values).ok_or(Error::Unvoiced)
}

/// Least-squares line through `(j, c[j])` for `j` in `lo..=hi`.
fn line_fit(lo: usize, hi: usize, c: &[f64]) -> (f64, f64) {
    let n = (hi - lo + 1) as f64;
    let mx = (lo + hi) as f64 / 2.0;
    let my = c[lo..=hi].iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (j, &v) in c.iter().enumerate().take(hi + 1).skip(lo) {
        let dx = j as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Centred moving averages across rows and along each row; windows shrink
/// at the edges.
fn smooth_rows(rows: &[Vec<f64>], across: usize, along: usize) -> Vec<Vec<f64>> {
    let moving = |len: usize, width: usize, get: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let h = width / 2;
        (0..len)
            .map(|i| {
                let (a, b) = (i.saturating_sub(h), (i + h).min(len - 1));
                (a..=b).map(get).sum::<f64>() / (b - a + 1) as f64
            })
            .collect()
    };
    let Some(width) = rows.first().map(Vec::len) else {
        return Vec::new();
    };
    let mut out = vec![vec![0.0; width]; rows.len()];
    for j in 0..width {
        let col = moving(rows.len(), across.max(1), &|i| rows[i][j]);
        for (row, v) in out.iter_mut().zip(col) {
            row[j] = v;
        }
    }
    out.iter()
        .map(|row| moving(width, along.max(1), &|j| row[j]))
        .collect()
}

/// Local jitter in percent: mean absolute difference of consecutive voiced
/// periods over the mean period. 0 when fewer than two periods are voiced.
pub fn jitter(clip: &AudioClip, contour: &PitchContour) -> f64 {
    let (mut diff, mut total, mut n_diff, mut n_total) = (0.0, 0.0, 0usize, 0usize);
    for run in mark_epochs(clip, contour).voiced_periods() {
        total += run.iter().sum::<f64>();
        n_total += run.len();
        for w in run.windows(2) {
            diff += (w[1] - w[0]).abs();
            n_diff += 1;
        }
    }
    if n_diff == 0 {
        return 0.0;
    }
    100.0 * (diff / n_diff as f64) / (total / n_total as f64)
}

/// All features of `clip` given a pitch contour of the same clip.
pub fn features_with_contour(clip: &AudioClip, contour: &PitchContour) -> Result<VoiceFeatures> {
    Ok(VoiceFeatures {
        mean_pitch_hz: mean_pitch(contour)?,
        h1h2_db: h1_h2(clip, contour)?,
        hnr_db: hnr(clip, contour)?,
        cpp_db: cpp_with(clip, Some(contour), &CppConfig::default())?,
        voiced_fraction: contour.voiced_fraction(),
        jitter_pct: jitter(clip, contour),
    })
}

/// Removes non-speech with the VAD, then measures the remaining audio.
pub fn extract_features(clip: &AudioClip) -> Result<VoiceFeatures> {
    let speech = apply_segments(clip, &detect_speech(clip))?;
    let contour = estimate_contour(&speech, &PitchRange::default())?;
    features_with_contour(&speech, &contour)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_glottal, GlottalSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    const SR: u32 = 16_000;

    fn harmonics(f0: f64, amps: &[f64], secs: f64) -> AudioClip {
        let n = (secs * SR as f64) as usize;
        let x = (0..n)
            .map(|i| {
                let t = i as f64 / SR as f64;
                amps.iter()
                    .enumerate()
                    .map(|(k, a)| a * (2.0 * PI * f0 * (k + 1) as f64 * t).sin())
                    .sum()
            })
            .collect();
        AudioClip::new(x, SR).unwrap()
    }

    fn noise(n: usize, std: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                std * v
            })
            .collect()
    }

    fn contour(clip: &AudioClip) -> PitchContour {
        estimate_contour(clip, &PitchRange::default()).unwrap()
    }

    fn constant_contour(clip: &AudioClip, f0: f64) -> PitchContour {
        let c = contour(clip);
        PitchContour::new(c.hop_s, c.frame_len_s, vec![f0; c.len()])
    }

    #[test]
    fn h1h2_two_tone() {
        let clip = harmonics(150.0, &[1.0, 0.5], 1.0);
        let v = h1_h2(&clip, &contour(&clip)).unwrap();
        assert!((v - 20.0 * 2f64.log10()).abs() <= 0.3, "{v}");
    }

    #[test]
    fn h1h2_equal_harmonics() {
        let clip = harmonics(150.0, &[1.0, 1.0, 1.0], 1.0);
        let v = h1_h2(&clip, &contour(&clip)).unwrap();
        assert!(v.abs() <= 0.3, "{v}");
    }

    #[test]
    fn h1h2_sawtooth() {
        let amps: Vec<f64> = (1..=40).map(|k| 1.0 / k as f64).collect();
        let clip = harmonics(110.0, &amps, 1.0);
        let v = h1_h2(&clip, &contour(&clip)).unwrap();
        assert!((v - 6.0206).abs() <= 0.5, "{v}");
    }

    #[test]
    fn unvoiced_contour_is_an_error() {
        let clip = harmonics(150.0, &[1.0], 0.5);
        let c = PitchContour::new(0.01, 0.04, vec![0.0; 10]);
        assert!(matches!(h1_h2(&clip, &c), Err(Error::Unvoiced)));
        assert!(matches!(hnr(&clip, &c), Err(Error::Unvoiced)));
    }

    #[test]
    fn hnr_of_pure_sine_is_clamped_high() {
        let clip = harmonics(200.0, &[0.5], 1.0);
        let v = hnr(&clip, &contour(&clip)).unwrap();
        assert!(v >= 40.0 && v <= HNR_MAX_DB, "{v}");
    }

    #[test]
    fn hnr_tracks_constructed_snr() {
        let tone = harmonics(200.0, &[1.0], 2.0);
        // sine power 0.5, noise power 0.05: 10 dB
        let x: Vec<f64> = tone
            .samples()
            .iter()
            .zip(noise(tone.len(), 0.05f64.sqrt(), 3))
            .map(|(a, b)| a + b)
            .collect();
        let clip = AudioClip::new(x, SR).unwrap();
        let v = hnr(&clip, &constant_contour(&clip, 200.0)).unwrap();
        assert!((7.0..=13.0).contains(&v), "{v}");
    }

    #[test]
    fn hnr_falls_with_subharmonic_gain() {
        let mut last = f64::INFINITY;
        for g in [0.0, 0.2, 0.4, 0.6] {
            let mut spec = GlottalSpec::modal(130.0);
            spec.subharmonic_gain = g;
            let clip = synth_glottal(&spec, 1.0, SR, 5).unwrap();
            let v = hnr(&clip, &constant_contour(&clip, 130.0)).unwrap();
            assert!(v < last, "gain {g}: {v} !< {last}");
            last = v;
        }
    }

    #[test]
    fn cpp_periodic_vs_noise() {
        let mut x = vec![0.0; 16_000];
        x.iter_mut().step_by(160).for_each(|v| *v = 1.0);
        let pulses = AudioClip::new(x, SR).unwrap();
        let periodic = cpp(&pulses).unwrap();
        assert!(periodic >= 15.0, "{periodic}");
        for seed in 0..4 {
            let n = AudioClip::new(noise(16_000, 0.3, seed), SR).unwrap();
            let v = cpp(&n).unwrap();
            assert!(v <= 5.0, "seed {seed}: {v}");
        }
    }

    #[test]
    fn cpp_drops_with_jitter() {
        let modal = synth_glottal(&GlottalSpec::modal(120.0), 1.0, SR, 1).unwrap();
        let mut spec = GlottalSpec::modal(120.0);
        spec.jitter_pct = 5.0;
        let jittery = synth_glottal(&spec, 1.0, SR, 1).unwrap();
        assert!(cpp(&modal).unwrap() > cpp(&jittery).unwrap());
    }

    #[test]
    fn cpp_rejects_short_clip() {
        let clip = AudioClip::new(vec![0.1; 500], SR).unwrap();
        assert!(cpp(&clip).is_err());
    }

    #[test]
    fn jitter_reflects_period_perturbation() {
        let steady = synth_glottal(&GlottalSpec::modal(120.0), 1.0, SR, 2).unwrap();
        let mut spec = GlottalSpec::modal(120.0);
        spec.jitter_pct = 3.0;
        let shaky = synth_glottal(&spec, 1.0, SR, 2).unwrap();
        let a = jitter(&steady, &contour(&steady));
        let b = jitter(&shaky, &contour(&shaky));
        assert!(a < 1.0, "{a}");
        assert!(b > a + 1.0, "{b} vs {a}");
    }

    #[test]
    fn creaky_contrast() {
        let modal = synth_glottal(&GlottalSpec::with_creakiness(130.0, 0.0), 1.5, SR, 3).unwrap();
        let creaky = synth_glottal(&GlottalSpec::with_creakiness(130.0, 1.0), 1.5, SR, 3).unwrap();
        let m = extract_features(&modal).unwrap();
        let c = extract_features(&creaky).unwrap();
        assert!(c.mean_pitch_hz < m.mean_pitch_hz);
        assert!(c.hnr_db < m.hnr_db);
        assert!(c.cpp_db < m.cpp_db);
        assert!(m.is_finite() && c.is_finite());
    }

    #[test]
    fn padding_with_silence_changes_little() {
        let clip = synth_glottal(&GlottalSpec::with_creakiness(120.0, 0.3), 1.5, SR, 4).unwrap();
        let mut padded = vec![0.0; 8000];
        padded.extend_from_slice(clip.samples());
        padded.extend(vec![0.0; 8000]);
        let a = extract_features(&clip).unwrap();
        let b = extract_features(&AudioClip::new(padded, SR).unwrap()).unwrap();
        for (x, y) in [
            (a.mean_pitch_hz, b.mean_pitch_hz),
            (a.h1h2_db, b.h1h2_db),
            (a.hnr_db, b.hnr_db),
            (a.cpp_db, b.cpp_db),
        ] {
            assert!((x - y).abs() <= 0.05 * x.abs().max(y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn silence_has_no_features() {
        let clip = AudioClip::new(vec![0.0; 16_000], SR).unwrap();
        assert!(matches!(extract_features(&clip), Err(Error::NoSpeech)));
    }

    #[test]
    fn features_are_gain_invariant() {
        let clip = synth_glottal(&GlottalSpec::with_creakiness(140.0, 0.5), 1.0, SR, 6).unwrap();
        let a = extract_features(&clip).unwrap();
        for gain in [0.01, 0.3, 1.9] {
            let b = extract_features(&clip.scaled(gain)).unwrap();
            assert!((a.mean_pitch_hz - b.mean_pitch_hz).abs() < 0.1);
            assert!((a.h1h2_db - b.h1h2_db).abs() < 0.1);
            assert!((a.hnr_db - b.hnr_db).abs() < 0.1);
            assert!((a.cpp_db - b.cpp_db).abs() < 0.1);
        }
    }

    #[test]
    fn line_fit_recovers_line() {
        let c: Vec<f64> = (0..50).map(|j| 3.0 - 0.25 * j as f64).collect();
        let (s, i) = line_fit(5, 40, &c);
        assert!((s + 0.25).abs() < 1e-12 && (i - 3.0).abs() < 1e-12);
    }
}
