//! Time-domain pitch-synchronous overlap-add.
//!
//! Analysis epochs are placed once per period at the maximum, near the
//! position predicted by the source contour, of the waveform smoothed over
//! half a period. Synthesis epochs advance by
//! the local analysis period divided by the target/source ratio; each one
//! receives the Hann-windowed two-period grain of the nearest analysis epoch.
//! Grain halves span the distance to the neighbouring epochs, so the windows
//! form a partition of unity and a unit ratio reproduces the input exactly.
//! Overlapping grains interfere differently at every ratio, so the output is
//! finally scaled by a smooth gain envelope that restores the short-time
//! energy of the input.

use log::warn;

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::pitch::PitchContour;

/// Spacing of pseudo-epochs in unvoiced regions.
pub const UNVOICED_HOP_S: f64 = 0.010;
pub const MIN_RATIO: f64 = 0.25;
pub const MAX_RATIO: f64 = 4.0;
/// Frame length of the energy-matching envelope; frames overlap by half.
const ENERGY_FRAME_S: f64 = 0.025;
const MAX_GAIN: f64 = 4.0;

/// Pitch marks of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrain {
    /// Strictly increasing sample indices.
    pub epochs: Vec<usize>,
    /// Local period in samples (pseudo-mark spacing when unvoiced).
    pub periods: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl EpochTrain {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Index of the epoch closest to sample position `pos`.
    pub fn nearest(&self, pos: f64) -> usize {
        let i = self.epochs.partition_point(|&e| (e as f64) < pos);
        if i == 0 {
            0
        } else if i == self.epochs.len() {
            i - 1
        } else if pos - self.epochs[i - 1] as f64 <= self.epochs[i] as f64 - pos {
            i - 1
        } else {
            i
        }
    }

    /// Spacings between consecutive voiced epochs, in samples.
    pub fn voiced_periods(&self) -> Vec<Vec<f64>> {
        let mut runs = Vec::new();
        let mut current = Vec::new();
        for i in 1..self.epochs.len() {
            if self.voiced[i] && self.voiced[i - 1] {
                current.push((self.epochs[i] - self.epochs[i - 1]) as f64);
            } else if !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            runs.push(current);
        }
        runs
    }
}

/// Places analysis epochs guided by `contour`.
pub fn mark_epochs(clip: &AudioClip, contour: &PitchContour) -> EpochTrain {
    let sr = clip.sample_rate_hz() as f64;
    let x = clip.samples();
    let n = x.len();
    let unvoiced_hop = (UNVOICED_HOP_S * sr).round().max(1.0);
    let mut train = EpochTrain {
        epochs: Vec::new(),
        periods: Vec::new(),
        voiced: Vec::new(),
    };
    let mut next = 0.0_f64;
    let mut prev_voiced = false;
    while next < n as f64 {
        let floor = train.epochs.last().map_or(0, |&e| e + 1);
        let f0 = contour.value_at(next / sr);
        if f0 > 0.0 {
            let period = sr / f0;
            let (lo, hi) = if prev_voiced {
                (next - 0.25 * period, next + 0.25 * period)
            } else {
                (next, next + period)
            };
            let lo = (lo.round().max(0.0) as usize).max(floor);
            let hi = (hi.round() as usize).min(n - 1);
            if lo > hi {
                break;
            }
            let kernel = crate::audio::hann(((0.5 * period).round() as usize) | 1);
            let smoothed = |m: usize| {
                let half = kernel.len() / 2;
                kernel
                    .iter()
                    .enumerate()
                    .filter_map(|(j, w)| (m + j).checked_sub(half).and_then(|i| x.get(i)).map(|v| w * v))
                    .sum::<f64>()
            };
            let mark = (lo..=hi)
                .map(|m| (m, smoothed(m)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map_or(lo, |(m, _)| m);
            train.epochs.push(mark);
            train.periods.push(period);
            train.voiced.push(true);
            next = mark as f64 + period;
            prev_voiced = true;
        } else {
            let mark = (next.round() as usize).max(floor);
            if mark >= n {
                break;
            }
            train.epochs.push(mark);
            train.periods.push(unvoiced_hop);
            train.voiced.push(false);
            next = mark as f64 + unvoiced_hop;
            prev_voiced = false;
        }
    }
    train
}

/// Output of [`shift_pitch`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftResult {
    pub clip: AudioClip,
    /// Frames whose target/source ratio fell outside `[0.25, 4]` and were
    /// clamped.
    pub clamped_frames: usize,
}

impl ShiftResult {
    pub fn was_clamped(&self) -> bool {
        self.clamped_frames > 0
    }
}

/// Resynthesises `clip` so that its pitch follows `target` instead of
/// `source`. Both contours must be frame-aligned with each other; duration
/// is preserved exactly.
pub fn shift_pitch(
    clip: &AudioClip,
    source: &PitchContour,
    target: &PitchContour,
) -> Result<ShiftResult> {
    if source.len() != target.len() {
        return Err(Error::invalid(format!(
            "contour lengths differ: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    let mut clamped_frames = 0;
    let ratios: Vec<f64> = source
        .f0_hz
        .iter()
        .zip(&target.f0_hz)
        .map(|(&s, &t)| {
            if s > 0.0 && t > 0.0 {
                let r = t / s;
                if !(MIN_RATIO..=MAX_RATIO).contains(&r) {
                    clamped_frames += 1;
                }
                r.clamp(MIN_RATIO, MAX_RATIO)
            } else {
                0.0
            }
        })
        .collect();
    if clamped_frames > 0 {
        warn!("{clamped_frames} frames had pitch ratios outside [{MIN_RATIO}, {MAX_RATIO}]");
    }
    let ratio_track = PitchContour {
        f0_hz: ratios,
        ..source.clone()
    };

    let epochs = mark_epochs(clip, source);
    let sr = clip.sample_rate_hz() as f64;
    let x = clip.samples();
    let n = x.len();
    if epochs.is_empty() {
        return Ok(ShiftResult {
            clip: clip.clone(),
            clamped_frames,
        });
    }
    let last = epochs.len() - 1;
    let mut out = vec![0.0; n];
    let mut ts = epochs.epochs[0] as f64;
    let mut first = true;
    while ts < n as f64 {
        let k = epochs.nearest(ts);
        let centre = epochs.epochs[k];
        let left = (k > 0).then(|| centre - epochs.epochs[k - 1]);
        let right = (k < last).then(|| epochs.epochs[k + 1] - centre);
        let spacing = right.or(left).map_or(epochs.periods[k], |s| s as f64);
        let ratio = if epochs.voiced[k] {
            let r = ratio_track.value_at(ts / sr);
            if r > 0.0 {
                r
            } else {
                1.0
            }
        } else {
            1.0
        };
        let step = (spacing / ratio).max(1.0);
        let is_last = ts + step >= n as f64;
        let dst_centre = ts.round() as isize;

        let left_extent = match left {
            Some(l) if !first => l as isize,
            _ => centre as isize,
        };
        let right_extent = match right {
            Some(r) if !is_last => r as isize,
            _ => (n - centre) as isize,
        };
        for o in -left_extent..right_extent {
            let src = centre as isize + o;
            let dst = dst_centre + o;
            if src < 0 || src >= n as isize || dst < 0 || dst >= n as isize {
                continue;
            }
            let w = if o < 0 {
                match left {
                    Some(l) if !first => half_hann(o as f64 / l as f64),
                    _ => 1.0,
                }
            } else {
                match right {
                    Some(r) if !is_last => half_hann(o as f64 / r as f64),
                    _ => 1.0,
                }
            };
            out[dst as usize] += w * x[src as usize];
        }
        first = false;
        ts += step;
    }
    match_energy(&mut out, x, (ENERGY_FRAME_S * sr).round() as usize);
    Ok(ShiftResult {
        clip: AudioClip::new(out, clip.sample_rate_hz())?,
        clamped_frames,
    })
}

/// Scales `out` so its framewise energy follows `reference`. Frame gains are
/// linearly interpolated between frame centres.
fn match_energy(out: &mut [f64], reference: &[f64], frame: usize) {
    let n = out.len();
    let frame = frame.max(2);
    let hop = frame / 2;
    if n == 0 {
        return;
    }
    let energy = |x: &[f64], start: usize| x[start..(start + frame).min(n)].iter().map(|v| v * v).sum::<f64>();
    let starts: Vec<usize> = (0..n).step_by(hop).collect();
    let peak = starts.iter().map(|&s| energy(reference, s)).fold(0.0, f64::max);
    if peak <= 0.0 {
        return;
    }
    let eps = 1e-12 * peak;
    let gains: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let (e_ref, e_out) = (energy(reference, s), energy(out, s));
            if e_ref == e_out {
                1.0
            } else {
                ((e_ref + eps) / (e_out + eps)).sqrt().clamp(MAX_GAIN.recip(), MAX_GAIN)
            }
        })
        .collect();
    let centre = |k: usize| starts[k] as f64 + 0.5 * ((starts[k] + frame).min(n) - starts[k]) as f64;
    let mut k = 0;
    for (i, v) in out.iter_mut().enumerate() {
        let t = i as f64;
        while k + 1 < gains.len() && centre(k + 1) <= t {
            k += 1;
        }
        let g = if k + 1 == gains.len() || t <= centre(k) {
            gains[k]
        } else {
            let u = (t - centre(k)) / (centre(k + 1) - centre(k));
            gains[k] + u * (gains[k + 1] - gains[k])
        };
        *v *= g;
    }
}

/// Hann taper on `[-1, 1]`, 1 at the centre and 0 at the ends.
fn half_hann(u: f64) -> f64 {
    0.5 * (1.0 + (std::f64::consts::PI * u).cos())
}
