//! Framewise f0 estimation with the cumulative-mean-normalised difference
//! function, plus mean-pitch summaries.
//!
//! Each frame spans two maximum lags (`2 * sr / f_min` samples, 40 ms at the
//! default 50 Hz floor). The difference function is evaluated through an FFT
//! cross-correlation and prefix energies.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::vad::SpeechSegments;

/// Absolute threshold on the normalised difference function.
pub const YIN_THRESHOLD: f64 = 0.15;
/// Frames whose deepest normalised-difference minimum stays above this are
/// unvoiced.
pub const VOICING_THRESHOLD: f64 = 0.35;
pub const PITCH_HOP_S: f64 = 0.010;
const MEDIAN_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchRange {
    pub f_min_hz: f64,
    pub f_max_hz: f64,
}

impl Default for PitchRange {
    fn default() -> Self {
        Self {
            f_min_hz: 50.0,
            f_max_hz: 500.0,
        }
    }
}

impl PitchRange {
    pub fn new(f_min_hz: f64, f_max_hz: f64) -> Self {
        Self { f_min_hz, f_max_hz }
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let quarter_rate = sample_rate_hz as f64 / 4.0;
        if !(self.f_min_hz > 0.0 && self.f_min_hz < self.f_max_hz && self.f_max_hz < quarter_rate)
        {
            return Err(Error::invalid(format!(
                "pitch range [{}, {}] invalid at {} Hz",
                self.f_min_hz, self.f_max_hz, sample_rate_hz
            )));
        }
        Ok(())
    }
}

/// Framewise f0 track. `f0_hz[i] == 0` marks an unvoiced frame; frame `i`
/// is centred at `frame_len_s / 2 + i * hop_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchContour {
    pub hop_s: f64,
    pub frame_len_s: f64,
    pub f0_hz: Vec<f64>,
    pub voicing_conf: Vec<f64>,
}

impl PitchContour {
    pub fn new(hop_s: f64, frame_len_s: f64, f0_hz: Vec<f64>) -> Self {
        let voicing_conf = f0_hz.iter().map(|&f| if f > 0.0 { 1.0 } else { 0.0 }).collect();
        Self {
            hop_s,
            frame_len_s,
            f0_hz,
            voicing_conf,
        }
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        self.frame_len_s / 2.0 + i as f64 * self.hop_s
    }

    pub fn voiced_count(&self) -> usize {
        self.f0_hz.iter().filter(|&&f| f > 0.0).count()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.f0_hz.is_empty() {
            0.0
        } else {
            self.voiced_count() as f64 / self.f0_hz.len() as f64
        }
    }

    /// f0 at time `t`: linear between two voiced neighbours, otherwise the
    /// nearer frame's value (which may be 0).
    pub fn value_at(&self, t: f64) -> f64 {
        if self.f0_hz.is_empty() {
            return 0.0;
        }
        let pos = (t - self.frame_len_s / 2.0) / self.hop_s;
        if pos <= 0.0 {
            return self.f0_hz[0];
        }
        let i = pos.floor() as usize;
        if i + 1 >= self.f0_hz.len() {
            return self.f0_hz[self.f0_hz.len() - 1];
        }
        let frac = pos - i as f64;
        let (a, b) = (self.f0_hz[i], self.f0_hz[i + 1]);
        if a > 0.0 && b > 0.0 {
            a + (b - a) * frac
        } else if frac < 0.5 {
            a
        } else {
            b
        }
    }

    /// Copy with frames whose centre lies outside `segments` set unvoiced.
    pub fn restricted_to(&self, segments: &SpeechSegments) -> Self {
        let mut out = self.clone();
        for i in 0..out.f0_hz.len() {
            if !segments.contains(self.frame_time(i)) {
                out.f0_hz[i] = 0.0;
                out.voicing_conf[i] = 0.0;
            }
        }
        out
    }

    /// Copy with every voiced value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.f0_hz.iter_mut().filter(|f| **f > 0.0).for_each(|f| *f *= factor);
        out
    }
}

/// Estimates the f0 contour of `clip` within `range`.
pub fn estimate_contour(clip: &AudioClip, range: &PitchRange) -> Result<PitchContour> {
    let sr = clip.sample_rate_hz() as f64;
    range.validate(clip.sample_rate_hz())?;
    let tau_max = (sr / range.f_min_hz).ceil() as usize;
    let tau_min = ((sr / range.f_max_hz).floor() as usize).max(2);
    let window = tau_max;
    let frame_len = window + tau_max;
    let hop = ((PITCH_HOP_S * sr).round() as usize).max(1);
    let x = clip.samples();
    let n_frames = crate::audio::frame_count(x.len(), frame_len, hop);

    let mut yin = DifferenceFunction::new(window, tau_max);
    let mut f0 = Vec::with_capacity(n_frames);
    let mut conf = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let frame = &x[i * hop..i * hop + frame_len];
        match yin.best_lag(frame, tau_min) {
            Some((lag, dprime)) => {
                let hz = sr / lag;
                if hz >= range.f_min_hz && hz <= range.f_max_hz {
                    f0.push(hz);
                    conf.push((1.0 - dprime).clamp(0.0, 1.0));
                } else {
                    f0.push(0.0);
                    conf.push(0.0);
                }
            }
            None => {
                f0.push(0.0);
                conf.push(0.0);
            }
        }
    }
    median_smooth(&mut f0, MEDIAN_WINDOW);
    Ok(PitchContour {
        hop_s: hop as f64 / sr,
        frame_len_s: frame_len as f64 / sr,
        f0_hz: f0,
        voicing_conf: conf,
    })
}

/// Arithmetic mean over voiced frames.
pub fn mean_pitch(contour: &PitchContour) -> Result<f64> {
    let voiced: Vec<f64> = contour.f0_hz.iter().cloned().filter(|&f| f > 0.0).collect();
    if voiced.is_empty() {
        return Err(Error::Unvoiced);
    }
    Ok(voiced.iter().sum::<f64>() / voiced.len() as f64)
}

/// Replaces each voiced value with the median of the voiced values in a
/// centred window. Unvoiced frames are left at 0.
fn median_smooth(f0: &mut [f64], width: usize) {
    let half = width / 2;
    let src = f0.to_vec();
    let mut buf = Vec::with_capacity(width);
    for i in 0..src.len() {
        if src[i] <= 0.0 {
            continue;
        }
        buf.clear();
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(src.len());
        buf.extend(src[lo..hi].iter().cloned().filter(|&v| v > 0.0));
        buf.sort_by(f64::total_cmp);
        let m = buf.len();
        f0[i] = if m % 2 == 1 {
            buf[m / 2]
        } else {
            0.5 * (buf[m / 2 - 1] + buf[m / 2])
        };
    }
}

/// Reusable buffers for the per-frame difference function.
struct DifferenceFunction {
    window: usize,
    tau_max: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    a: Vec<Complex<f64>>,
    b: Vec<Complex<f64>>,
    d: Vec<f64>,
    dprime: Vec<f64>,
}

impl DifferenceFunction {
    fn new(window: usize, tau_max: usize) -> Self {
        let n = (window + window + tau_max).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            window,
            tau_max,
            fft: planner.plan_fft_forward(n),
            ifft: planner.plan_fft_inverse(n),
            a: vec![Complex::default(); n],
            b: vec![Complex::default(); n],
            d: vec![0.0; tau_max + 1],
            dprime: vec![1.0; tau_max + 1],
        }
    }

    /// Returns the refined lag (samples) and its normalised difference, or
    /// `None` when no lag dips below the threshold.
    fn best_lag(&mut self, frame: &[f64], tau_min: usize) -> Option<(f64, f64)> {
        let (w, tmax) = (self.window, self.tau_max);
        let n = self.a.len();
        debug_assert_eq!(frame.len(), w + tmax);

        // cross-correlation c[tau] = sum_j frame[j] * frame[j + tau], j < w
        for (i, v) in self.a.iter_mut().enumerate() {
            *v = Complex::new(if i < w { frame[i] } else { 0.0 }, 0.0);
        }
        for (i, v) in self.b.iter_mut().enumerate() {
            *v = Complex::new(if i < frame.len() { frame[i] } else { 0.0 }, 0.0);
        }
        self.fft.process(&mut self.a);
        self.fft.process(&mut self.b);
        for (a, b) in self.a.iter_mut().zip(&self.b) {
            *a = a.conj() * b;
        }
        self.ifft.process(&mut self.a);
        let scale = 1.0 / n as f64;

        let mut prefix = Vec::with_capacity(frame.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for s in frame {
            acc += s * s;
            prefix.push(acc);
        }
        let e0 = prefix[w];
        if e0 <= 0.0 {
            return None;
        }

        self.d[0] = 0.0;
        self.dprime[0] = 1.0;
        let mut running = 0.0;
        for tau in 1..=tmax {
            let etau = prefix[tau + w] - prefix[tau];
            let c = self.a[tau].re * scale;
            let d = (e0 + etau - 2.0 * c).max(0.0);
            self.d[tau] = d;
            running += d;
            self.dprime[tau] = if running > 0.0 {
                d * tau as f64 / running
            } else {
                1.0
            };
        }

        let mut tau = tau_min;
        while tau <= tmax && self.dprime[tau] >= YIN_THRESHOLD {
            tau += 1;
        }
        if tau > tmax {
            // no dip under the absolute threshold: fall back to the deepest
            // interior minimum if it is still clearly periodic
            tau = (tau_min.max(1)..tmax)
                .filter(|&t| self.dprime[t] <= self.dprime[t - 1] && self.dprime[t] <= self.dprime[t + 1])
                .min_by(|&a, &b| self.dprime[a].total_cmp(&self.dprime[b]))?;
            if self.dprime[tau] >= VOICING_THRESHOLD {
                return None;
            }
        }
        while tau < tmax && self.dprime[tau + 1] < self.dprime[tau] {
            tau += 1;
        }
        let refined = if tau > 1 && tau < tmax {
            let (y0, y1, y2) = (self.dprime[tau - 1], self.dprime[tau], self.dprime[tau + 1]);
            let denom = y0 - 2.0 * y1 + y2;
            if denom.abs() > 1e-15 {
                tau as f64 + (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5)
            } else {
                tau as f64
            }
        } else {
            tau as f64
        };
        Some((refined, self.dprime[tau]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_glottal, GlottalSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn sine(freq: f64, secs: f64) -> AudioClip {
        let n = (secs * 16_000.0) as usize;
        let x = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16_000.0).sin())
            .collect();
        AudioClip::new(x, 16_000).unwrap()
    }

    /// Independent estimate: peak of a heavily zero-padded magnitude spectrum.
    fn fft_peak_hz(clip: &AudioClip) -> f64 {
        let n = 1 << 18;
        let mut buf: Vec<Complex<f64>> = clip
            .samples()
            .iter()
            .map(|&s| Complex::new(s, 0.0))
            .chain(std::iter::repeat(Complex::default()))
            .take(n)
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let k = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        k as f64 * 16_000.0 / n as f64
    }

    #[test]
    fn sine_220_within_one_hz() {
        let clip = sine(220.0, 0.5);
        let oracle = fft_peak_hz(&clip);
        assert!((oracle - 220.0).abs() < 0.1);
        let c = estimate_contour(&clip, &PitchRange::default()).unwrap();
        assert!(c.voiced_fraction() == 1.0);
        for &f in &c.f0_hz {
            assert!((f - oracle).abs() <= 1.0, "frame f0 {f}");
        }
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..16_000)
            .map(|_| 0.3 * { let v: f64 = StandardNormal.sample(&mut rng); v })
            .collect();
        let c = estimate_contour(&AudioClip::new(x, 16_000).unwrap(), &PitchRange::default()).unwrap();
        assert!(c.voiced_fraction() <= 0.1, "voiced {}", c.voiced_fraction());
    }

    #[test]
    fn glottal_120_mean_within_2hz() {
        let clip = synth_glottal(&GlottalSpec::modal(120.0), 1.0, 16_000, 1).unwrap();
        let c = estimate_contour(&clip, &PitchRange::default()).unwrap();
        let m = mean_pitch(&c).unwrap();
        assert!((m - 120.0).abs() <= 2.0, "mean {m}");
    }

    #[test]
    fn silence_is_unvoiced() {
        let clip = AudioClip::new(vec![0.0; 8000], 16_000).unwrap();
        let c = estimate_contour(&clip, &PitchRange::default()).unwrap();
        assert_eq!(c.voiced_count(), 0);
        assert!(matches!(mean_pitch(&c), Err(Error::Unvoiced)));
    }

    #[test]
    fn mean_pitch_examples() {
        let c = PitchContour::new(0.01, 0.04, vec![100.0, 100.0, 0.0, 100.0]);
        assert_eq!(mean_pitch(&c).unwrap(), 100.0);
        let c = PitchContour::new(0.01, 0.04, vec![100.0, 200.0]);
        assert_eq!(mean_pitch(&c).unwrap(), 150.0);
    }

    #[test]
    fn frame_count_follows_frame_geometry() {
        let c = estimate_contour(&sine(200.0, 1.0), &PitchRange::default()).unwrap();
        assert_eq!(c.len(), (16_000 - 640) / 160 + 1);
        assert!((c.frame_len_s - 0.04).abs() < 1e-12);
    }

    #[test]
    fn time_reversal_preserves_mean() {
        let clip = synth_glottal(&GlottalSpec::modal(150.0), 0.8, 16_000, 5).unwrap();
        let fwd = mean_pitch(&estimate_contour(&clip, &PitchRange::default()).unwrap()).unwrap();
        let rev = mean_pitch(&estimate_contour(&clip.reversed(), &PitchRange::default()).unwrap()).unwrap();
        assert!((fwd - rev).abs() / fwd < 0.02);
    }

    #[test]
    fn value_at_interpolates_voiced_neighbours() {
        let c = PitchContour::new(0.01, 0.04, vec![100.0, 200.0, 0.0]);
        assert!((c.value_at(0.025) - 150.0).abs() < 1e-9);
        assert_eq!(c.value_at(0.0), 100.0);
        assert_eq!(c.value_at(0.034), 200.0);
        assert_eq!(c.value_at(0.037), 0.0);
    }

    #[test]
    fn invalid_range_rejected() {
        let clip = sine(200.0, 0.2);
        assert!(estimate_contour(&clip, &PitchRange::new(300.0, 100.0)).is_err());
        assert!(estimate_contour(&clip, &PitchRange::new(50.0, 5000.0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sine_within_one_percent(freq in 60.0f64..400.0) {
            let c = estimate_contour(&sine(freq, 0.3), &PitchRange::default()).unwrap();
            prop_assert_eq!(c.voiced_count(), c.len());
            for &f in &c.f0_hz {
                prop_assert!((f - freq).abs() <= 0.01 * freq, "{} vs {}", f, freq);
            }
        }

        #[test]
        fn gain_invariance(gain in 0.01f64..20.0) {
            let clip = synth_glottal(&GlottalSpec::with_creakiness(140.0, 0.3), 0.4, 16_000, 9).unwrap();
            let a = estimate_contour(&clip, &PitchRange::default()).unwrap();
            let b = estimate_contour(&clip.scaled(gain), &PitchRange::default()).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.f0_hz.iter().zip(&b.f0_hz) {
                prop_assert!((x - y).abs() <= 1e-6 * x.max(1.0));
            }
        }
    }
}
