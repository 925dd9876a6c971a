//! Audio container, framing and windowing.
//!
//! Everything downstream works on mono `f64` samples at a single canonical
//! rate; [`read_wav`] folds channels and resamples on the way in.

mod resample;
mod synth;
mod wav;

pub use resample::resample;
pub use synth::{synth_glottal, F0Contour, Formant, GlottalSpec};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// Internal sample rate of the pipeline.
pub const CANONICAL_RATE_HZ: u32 = 16_000;

/// Lowest sample rate accepted anywhere.
pub const MIN_RATE_HZ: u32 = 8_000;

/// Mono sample buffer with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    /// Builds a clip, rejecting non-finite samples and rates below 8 kHz.
    ///
    /// Samples are not clipped to `[-1, 1]`; processing steps may overshoot
    /// slightly and [`write_wav`] saturates on output.
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz < MIN_RATE_HZ {
            return Err(Error::invalid(format!(
                "sample rate {sample_rate_hz} Hz below {MIN_RATE_HZ} Hz"
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }

    /// Returns a copy with every sample multiplied by `gain`.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Returns the clip played backwards.
    pub fn reversed(&self) -> Self {
        let mut samples = self.samples.clone();
        samples.reverse();
        Self {
            samples,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub(crate) fn from_parts_unchecked(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Self {
            samples,
            sample_rate_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Rectangular,
    Hann,
}

impl Window {
    /// Symmetric window of length `n` (endpoints are zero for Hann).
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => hann(n),
        }
    }
}

/// Symmetric Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![1.0; n];
    }
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / m).cos())
        .collect()
}

/// Frame length, hop and window used to slice a clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSpec {
    pub frame_len_s: f64,
    pub hop_s: f64,
    pub window: Window,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            frame_len_s: 0.040,
            hop_s: 0.010,
            window: Window::Hann,
        }
    }
}

impl FrameSpec {
    pub fn new(frame_len_s: f64, hop_s: f64, window: Window) -> Result<Self> {
        if !(hop_s > 0.0 && hop_s <= frame_len_s) {
            return Err(Error::invalid(format!(
                "frame spec requires 0 < hop ({hop_s}) <= frame length ({frame_len_s})"
            )));
        }
        Ok(Self {
            frame_len_s,
            hop_s,
            window,
        })
    }

    pub fn frame_len_samples(&self, sample_rate_hz: u32) -> usize {
        ((self.frame_len_s * sample_rate_hz as f64).round() as usize).max(1)
    }

    pub fn hop_samples(&self, sample_rate_hz: u32) -> usize {
        ((self.hop_s * sample_rate_hz as f64).round() as usize).max(1)
    }
}

/// Number of whole frames of `frame_len` that fit with hop `hop`.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len || hop == 0 {
        0
    } else {
        (len - frame_len) / hop + 1
    }
}

/// One windowed analysis frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub start_s: f64,
    pub start_sample: usize,
    pub samples: Vec<f64>,
}

/// Slices `clip` into windowed frames. A clip shorter than one frame yields
/// no frames.
pub fn frame_signal(clip: &AudioClip, spec: &FrameSpec) -> Vec<Frame> {
    let sr = clip.sample_rate_hz();
    let flen = spec.frame_len_samples(sr);
    let hop = spec.hop_samples(sr);
    let window = spec.window.coefficients(flen);
    (0..frame_count(clip.len(), flen, hop))
        .map(|i| {
            let start = i * hop;
            let samples = clip.samples()[start..start + flen]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect();
            Frame {
                start_s: start as f64 / sr as f64,
                start_sample: start,
                samples,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_clips() {
        assert!(AudioClip::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(AudioClip::new(vec![0.0], 4_000).is_err());
        assert!(AudioClip::new(vec![], 16_000).is_ok());
    }

    #[test]
    fn one_second_gives_97_frames() {
        let clip = AudioClip::new(vec![0.1; 16_000], 16_000).unwrap();
        let frames = frame_signal(&clip, &FrameSpec::default());
        assert_eq!(frames.len(), 97);
        assert!((frames[1].start_s - 0.01).abs() < 1e-12);
    }

    #[test]
    fn rectangular_frame_is_raw_slice() {
        let samples: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.01).sin()).collect();
        let clip = AudioClip::new(samples.clone(), 16_000).unwrap();
        let spec = FrameSpec::new(0.04, 0.01, Window::Rectangular).unwrap();
        let frames = frame_signal(&clip, &spec);
        assert_eq!(frames[2].samples, samples[320..320 + 640].to_vec());
    }

    #[test]
    fn hann_frame_endpoints_vanish() {
        let clip = AudioClip::new(vec![1.0; 4000], 16_000).unwrap();
        let frames = frame_signal(&clip, &FrameSpec::default());
        let f = &frames[0].samples;
        assert!(f[0].abs() < 1e-12 && f[f.len() - 1].abs() < 1e-12);
        assert!((f[f.len() / 2] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn short_clip_has_no_frames() {
        let clip = AudioClip::new(vec![0.5; 100], 16_000).unwrap();
        assert!(frame_signal(&clip, &FrameSpec::default()).is_empty());
    }

    #[test]
    fn hop_longer_than_frame_is_rejected() {
        assert!(FrameSpec::new(0.01, 0.02, Window::Hann).is_err());
        assert!(FrameSpec::new(0.01, 0.0, Window::Hann).is_err());
    }

    proptest! {
        #[test]
        fn frame_count_matches_closed_form(len in 0usize..5000, flen in 1usize..400, hop_frac in 0.01f64..1.0) {
            let hop = ((flen as f64 * hop_frac).round() as usize).clamp(1, flen);
            let n = frame_count(len, flen, hop);
            if len < flen {
                prop_assert_eq!(n, 0);
            } else {
                prop_assert_eq!(n, (len - flen) / hop + 1);
                // last frame fits, one more would not
                prop_assert!((n - 1) * hop + flen <= len);
                prop_assert!(n * hop + flen > len);
            }
        }
    }
}
