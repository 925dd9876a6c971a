//! Deterministic glottal-source vowel synthesizer.
//!
//! A Rosenberg pulse train drives a cascade of second-order formant
//! resonators. Creaky phonation is modelled with period jitter and an
//! alternating pulse amplitude that injects energy at f0/2.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::error::{Error, Result};

pub const F0_MIN_HZ: f64 = 40.0;
pub const F0_MAX_HZ: f64 = 600.0;

/// Output peak before noise is added.
const PEAK_LEVEL: f64 = 0.5;

/// Fundamental frequency as a function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum F0Contour {
    Constant(f64),
    /// Linear glide from start to end over the clip duration.
    Linear { start_hz: f64, end_hz: f64 },
    /// Piecewise-linear `(time_s, f0_hz)` points; held constant outside.
    Breakpoints(Vec<(f64, f64)>),
}

impl F0Contour {
    pub fn at(&self, t: f64, duration_s: f64) -> f64 {
        match self {
            F0Contour::Constant(f) => *f,
            F0Contour::Linear { start_hz, end_hz } => {
                let x = if duration_s > 0.0 {
                    (t / duration_s).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                start_hz + (end_hz - start_hz) * x
            }
            F0Contour::Breakpoints(pts) => {
                if pts.is_empty() {
                    return 0.0;
                }
                if t <= pts[0].0 {
                    return pts[0].1;
                }
                for w in pts.windows(2) {
                    let ((t0, f0), (t1, f1)) = (w[0], w[1]);
                    if t <= t1 {
                        let x = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
                        return f0 + (f1 - f0) * x;
                    }
                }
                pts[pts.len() - 1].1
            }
        }
    }

    fn extremes(&self) -> (f64, f64) {
        match self {
            F0Contour::Constant(f) => (*f, *f),
            F0Contour::Linear { start_hz, end_hz } => (start_hz.min(*end_hz), start_hz.max(*end_hz)),
            F0Contour::Breakpoints(pts) => pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.1), hi.max(p.1))
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
}

impl Formant {
    pub const fn new(center_hz: f64, bandwidth_hz: f64) -> Self {
        Self {
            center_hz,
            bandwidth_hz,
        }
    }
}

/// Parameters of a synthetic sustained vowel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlottalSpec {
    pub f0: F0Contour,
    /// Fraction of each period during which the glottis is open.
    pub open_quotient: f64,
    /// Standard deviation of the relative period perturbation, in percent.
    pub jitter_pct: f64,
    /// Amplitude reduction of every other pulse; 0 gives a regular train.
    pub subharmonic_gain: f64,
    pub formants: Vec<Formant>,
    /// Additive white-noise level relative to the signal peak.
    pub noise_db: f64,
}

impl GlottalSpec {
    /// Modal /a/-like vowel at a constant f0.
    pub fn modal(f0_hz: f64) -> Self {
        Self {
            f0: F0Contour::Constant(f0_hz),
            open_quotient: 0.6,
            jitter_pct: 0.0,
            subharmonic_gain: 0.0,
            formants: vec![
                Formant::new(700.0, 80.0),
                Formant::new(1220.0, 90.0),
                Formant::new(2600.0, 120.0),
            ],
            noise_db: -120.0,
        }
    }

    /// Interpolates between modal phonation (`creakiness = 0`) and strongly
    /// creaky phonation (`creakiness = 1`): lower f0, shorter open phase,
    /// more jitter and stronger period alternation.
    pub fn with_creakiness(f0_hz: f64, creakiness: f64) -> Self {
        let c = creakiness.clamp(0.0, 1.0);
        Self {
            f0: F0Contour::Constant(f0_hz * (1.0 - 0.3 * c)),
            open_quotient: 0.6 - 0.3 * c,
            jitter_pct: 3.0 * c,
            subharmonic_gain: 0.5 * c,
            noise_db: -60.0,
            ..Self::modal(f0_hz)
        }
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let (lo, hi) = self.f0.extremes();
        if !(lo >= F0_MIN_HZ && hi <= F0_MAX_HZ) {
            return Err(Error::invalid(format!(
                "f0 range [{lo}, {hi}] outside [{F0_MIN_HZ}, {F0_MAX_HZ}] Hz"
            )));
        }
        if !(self.open_quotient > 0.0 && self.open_quotient < 1.0) {
            return Err(Error::invalid("open quotient must lie in (0, 1)"));
        }
        if !(self.jitter_pct >= 0.0 && self.jitter_pct.is_finite()) {
            return Err(Error::invalid("jitter must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.subharmonic_gain) {
            return Err(Error::invalid("subharmonic gain must lie in [0, 1]"));
        }
        let nyquist = sample_rate_hz as f64 / 2.0;
        for f in &self.formants {
            if !(f.center_hz > 0.0 && f.center_hz < nyquist && f.bandwidth_hz > 0.0) {
                return Err(Error::invalid(format!(
                    "formant {} Hz / {} Hz invalid at Nyquist {nyquist}",
                    f.center_hz, f.bandwidth_hz
                )));
            }
        }
        if !self.noise_db.is_finite() {
            return Err(Error::invalid("noise level must be finite"));
        }
        Ok(())
    }
}

/// Renders `duration_s` seconds of the vowel described by `spec`.
///
/// The output is bit-identical for identical `(spec, duration, rate, seed)`.
pub fn synth_glottal(
    spec: &GlottalSpec,
    duration_s: f64,
    sample_rate_hz: u32,
    seed: u64,
) -> Result<AudioClip> {
    spec.validate(sample_rate_hz)?;
    let sr = sample_rate_hz as f64;
    let n = (duration_s.max(0.0) * sr).round() as usize;
    if n == 0 {
        return AudioClip::new(Vec::new(), sample_rate_hz);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut source = vec![0.0; n];
    let mut onset = 0.0_f64;
    let mut pulse = 0usize;
    while onset < duration_s {
        let f0 = spec.f0.at(onset, duration_s);
        let u: f64 = StandardNormal.sample(&mut rng);
        let period = (1.0 + spec.jitter_pct / 100.0 * u).clamp(0.5, 1.5) / f0;
        let amp = if pulse % 2 == 1 {
            1.0 - spec.subharmonic_gain
        } else {
            1.0
        };
        let first = (onset * sr).ceil() as usize;
        let last = (((onset + period) * sr).ceil() as usize).min(n);
        for (i, s) in source.iter_mut().enumerate().take(last).skip(first) {
            let phase = (i as f64 / sr - onset) / period;
            *s = amp * rosenberg_derivative(phase, spec.open_quotient);
        }
        onset += period;
        pulse += 1;
    }

    let mut out = source;
    for f in &spec.formants {
        resonate(&mut out, f, sr);
    }

    let peak = out.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|s| *s *= PEAK_LEVEL / peak);
    }
    let noise_std = PEAK_LEVEL * 10f64.powf(spec.noise_db / 20.0);
    for s in out.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *s += noise_std * e;
    }
    AudioClip::new(out, sample_rate_hz)
}

/// Negated time derivative of the Rosenberg glottal flow pulse, normalised
/// so the closing peak is independent of the period. `phase` in `[0, 1)`.
fn rosenberg_derivative(phase: f64, open_quotient: f64) -> f64 {
    let open = open_quotient;
    let rise = open * 2.0 / 3.0;
    let fall = open - rise;
    if phase < rise {
        -0.5 * PI / rise * (PI * phase / rise).sin() * fall
    } else if phase < open {
        PI / (2.0 * fall) * (0.5 * PI * (phase - rise) / fall).sin() * fall
    } else {
        0.0
    }
}

/// Klatt-style two-pole resonator with unity gain at DC, applied in place.
fn resonate(x: &mut [f64], formant: &Formant, sr: f64) {
    let c = -(-2.0 * PI * formant.bandwidth_hz / sr).exp();
    let b = 2.0 * (-PI * formant.bandwidth_hz / sr).exp() * (2.0 * PI * formant.center_hz / sr).cos();
    let a = 1.0 - b - c;
    let (mut y1, mut y2) = (0.0, 0.0);
    for s in x.iter_mut() {
        let y = a * *s + b * y1 + c * y2;
        y2 = y1;
        y1 = y;
        *s = y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = GlottalSpec::with_creakiness(120.0, 0.7);
        let a = synth_glottal(&spec, 0.5, 16_000, 11).unwrap();
        let b = synth_glottal(&spec, 0.5, 16_000, 11).unwrap();
        let c = synth_glottal(&spec, 0.5, 16_000, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_duration_gives_empty_clip() {
        let clip = synth_glottal(&GlottalSpec::modal(120.0), 0.0, 16_000, 0).unwrap();
        assert!(clip.is_empty());
    }

    #[test]
    fn length_and_peak() {
        let clip = synth_glottal(&GlottalSpec::modal(150.0), 1.0, 16_000, 0).unwrap();
        assert_eq!(clip.len(), 16_000);
        assert!((clip.peak() - PEAK_LEVEL).abs() < 1e-3);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = GlottalSpec::modal(700.0);
        assert!(synth_glottal(&spec, 0.1, 16_000, 0).is_err());
        spec = GlottalSpec::modal(120.0);
        spec.formants.push(Formant::new(9000.0, 100.0));
        assert!(synth_glottal(&spec, 0.1, 16_000, 0).is_err());
        spec = GlottalSpec::modal(120.0);
        spec.open_quotient = 1.0;
        assert!(spec.validate(16_000).is_err());
    }

    #[test]
    fn contour_shapes() {
        let lin = F0Contour::Linear {
            start_hz: 100.0,
            end_hz: 200.0,
        };
        assert_eq!(lin.at(0.5, 1.0), 150.0);
        let bp = F0Contour::Breakpoints(vec![(0.0, 100.0), (1.0, 300.0)]);
        assert_eq!(bp.at(0.25, 2.0), 150.0);
        assert_eq!(bp.at(5.0, 2.0), 300.0);
    }
}
