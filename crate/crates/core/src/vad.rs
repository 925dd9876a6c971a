//! Energy-based voice activity detection.
//!
//! Frames of 25 ms (10 ms hop) are active when their energy is within
//! `threshold_db` of the loudest frame. Inactive gaps of at most
//! `hangover_frames` between two active frames are bridged, then each active
//! run becomes the half-open interval between its outermost frame centres.

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

pub const VAD_FRAME_S: f64 = 0.025;
pub const VAD_HOP_S: f64 = 0.010;
pub const DEFAULT_THRESHOLD_DB: f64 = -35.0;
pub const DEFAULT_HANGOVER_FRAMES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadConfig {
    pub threshold_db: f64,
    pub hangover_frames: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            threshold_db: DEFAULT_THRESHOLD_DB,
            hangover_frames: DEFAULT_HANGOVER_FRAMES,
        }
    }
}

/// Sorted, non-overlapping half-open `(start_s, end_s)` intervals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeechSegments(Vec<(f64, f64)>);

impl SpeechSegments {
    pub fn new(mut intervals: Vec<(f64, f64)>) -> Result<Self> {
        intervals.retain(|(s, e)| e > s);
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in intervals.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::invalid(format!(
                    "overlapping segments {:?} and {:?}",
                    w[0], w[1]
                )));
            }
        }
        if intervals.iter().any(|(s, _)| *s < 0.0) {
            return Err(Error::invalid("segment starts before 0"));
        }
        Ok(Self(intervals))
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_duration_s(&self) -> f64 {
        self.0.iter().map(|(s, e)| e - s).sum()
    }

    /// True when time `t` falls inside any segment.
    pub fn contains(&self, t: f64) -> bool {
        self.0.iter().any(|&(s, e)| t >= s && t < e)
    }
}

/// Detects speech regions in `clip` with the default configuration.
pub fn detect_speech(clip: &AudioClip) -> SpeechSegments {
    detect_speech_with(clip, &VadConfig::default())
}

pub fn detect_speech_with(clip: &AudioClip, cfg: &VadConfig) -> SpeechSegments {
    let sr = clip.sample_rate_hz() as f64;
    let flen = ((VAD_FRAME_S * sr).round() as usize).max(1);
    let hop = ((VAD_HOP_S * sr).round() as usize).max(1);
    let x = clip.samples();
    if x.is_empty() {
        return SpeechSegments::default();
    }
    let n_frames = if x.len() <= flen {
        1
    } else {
        (x.len() - flen).div_ceil(hop) + 1
    };
    let energies: Vec<f64> = (0..n_frames)
        .map(|i| {
            let start = i * hop;
            let end = (start + flen).min(x.len());
            x[start..end].iter().map(|s| s * s).sum::<f64>() / flen as f64
        })
        .collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return SpeechSegments::default();
    }
    let floor = peak * 10f64.powf(cfg.threshold_db / 10.0);
    let mut active: Vec<bool> = energies.iter().map(|&e| e > 0.0 && e >= floor).collect();

    // bridge short gaps between active frames
    let mut i = 0;
    while i < active.len() {
        if active[i] {
            i += 1;
            continue;
        }
        let gap_start = i;
        while i < active.len() && !active[i] {
            i += 1;
        }
        let bounded = gap_start > 0 && i < active.len();
        if bounded && i - gap_start <= cfg.hangover_frames {
            active[gap_start..i].iter_mut().for_each(|a| *a = true);
        }
    }

    // Runs span the centres of their outermost frames; runs touching the
    // first or last frame extend to the clip edges.
    let duration = clip.duration_s();
    let centre = |k: usize| (k * hop) as f64 / sr + flen.min(x.len()) as f64 / (2.0 * sr);
    let half_hop = hop as f64 / (2.0 * sr);
    let run_bounds = |first: usize, last: usize| {
        let (mut s, mut e) = (centre(first), centre(last));
        if first == last {
            s -= half_hop;
            e += half_hop;
        }
        if first == 0 {
            s = 0.0;
        }
        if last + 1 == n_frames {
            e = duration;
        }
        (s.clamp(0.0, duration), e.clamp(0.0, duration))
    };

    let mut intervals = Vec::new();
    let mut k = 0;
    while k < n_frames {
        if !active[k] {
            k += 1;
            continue;
        }
        let first = k;
        while k < n_frames && active[k] {
            k += 1;
        }
        let (s, e) = run_bounds(first, k - 1);
        if e > s {
            intervals.push((s, e));
        }
    }
    SpeechSegments(intervals)
}

/// Concatenates the audio inside `segments`.
pub fn apply_segments(clip: &AudioClip, segments: &SpeechSegments) -> Result<AudioClip> {
    if segments.is_empty() {
        return Err(Error::NoSpeech);
    }
    let sr = clip.sample_rate_hz() as f64;
    let mut out = Vec::new();
    for &(s, e) in segments.intervals() {
        let a = ((s * sr).round() as usize).min(clip.len());
        let b = ((e * sr).round() as usize).min(clip.len());
        out.extend_from_slice(&clip.samples()[a..b]);
    }
    if out.is_empty() {
        return Err(Error::NoSpeech);
    }
    AudioClip::new(out, clip.sample_rate_hz())
}

/// Runs detection and trimming in one step.
pub fn trim_silence(clip: &AudioClip) -> Result<AudioClip> {
    apply_segments(clip, &detect_speech(clip))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn tone(n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * 200.0 * i as f64 / 16_000.0).sin())
            .collect()
    }

    #[test]
    fn silence_has_no_speech() {
        let clip = AudioClip::new(vec![0.0; 16_000], 16_000).unwrap();
        assert!(detect_speech(&clip).is_empty());
    }

    #[test]
    fn padded_tone_gives_one_segment() {
        let mut x = vec![0.0; 8000];
        x.extend(tone(16_000, 0.5));
        x.extend(vec![0.0; 8000]);
        let seg = detect_speech(&AudioClip::new(x, 16_000).unwrap());
        assert_eq!(seg.intervals().len(), 1);
        let (s, e) = seg.intervals()[0];
        assert!((s - 0.5).abs() <= 0.01, "start {s}");
        assert!((e - 1.5).abs() <= 0.01, "end {e}");
    }

    #[test]
    fn continuous_tone_covers_clip() {
        let clip = AudioClip::new(tone(16_000, 1.0), 16_000).unwrap();
        let seg = detect_speech(&clip);
        assert_eq!(seg.intervals(), &[(0.0, 1.0)]);
    }

    #[test]
    fn short_gaps_are_bridged() {
        let mut x = tone(8000, 0.5);
        x.extend(vec![0.0; 480]); // 30 ms
        x.extend(tone(8000, 0.5));
        let seg = detect_speech(&AudioClip::new(x, 16_000).unwrap());
        assert_eq!(seg.intervals().len(), 1);
    }

    #[test]
    fn long_gaps_split_segments() {
        let mut x = tone(8000, 0.5);
        x.extend(vec![0.0; 4800]);
        x.extend(tone(8000, 0.5));
        let seg = detect_speech(&AudioClip::new(x, 16_000).unwrap());
        assert_eq!(seg.intervals().len(), 2);
    }

    #[test]
    fn apply_segments_cases() {
        let clip = AudioClip::new(tone(16_000, 0.5), 16_000).unwrap();
        let whole = SpeechSegments::new(vec![(0.0, 1.0)]).unwrap();
        assert_eq!(apply_segments(&clip, &whole).unwrap(), clip);
        let two = SpeechSegments::new(vec![(0.1, 0.4), (0.6, 0.9)]).unwrap();
        assert_eq!(apply_segments(&clip, &two).unwrap().len(), 9600);
        assert!(matches!(
            apply_segments(&clip, &SpeechSegments::default()),
            Err(Error::NoSpeech)
        ));
    }

    #[test]
    fn overlapping_segments_rejected() {
        assert!(SpeechSegments::new(vec![(0.0, 0.5), (0.4, 0.8)]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gain_invariant_and_well_formed(
            lead in 0usize..8000, body in 1600usize..12000, tail in 0usize..8000,
            gain in 0.001f64..100.0,
        ) {
            let mut x = vec![0.0; lead];
            x.extend(tone(body, 0.3));
            x.extend(vec![0.0; tail]);
            let clip = AudioClip::new(x, 16_000).unwrap();
            let a = detect_speech(&clip);
            let b = detect_speech(&clip.scaled(gain));
            prop_assert_eq!(&a, &b);
            prop_assert!(a.total_duration_s() <= clip.duration_s() + 1e-12);
            for w in a.intervals().windows(2) {
                prop_assert!(w[0].1 <= w[1].0);
            }
        }
    }
}
