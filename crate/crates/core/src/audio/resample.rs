use std::f64::consts::PI;

use super::AudioClip;

/// Zero crossings of the sinc kernel on each side of the centre tap.
const HALF_ZEROS: f64 = 16.0;

/// Band-limited resampling by Hann-windowed sinc interpolation.
pub fn resample(clip: &AudioClip, target_rate_hz: u32) -> AudioClip {
    let from = clip.sample_rate_hz() as f64;
    let to = target_rate_hz as f64;
    if clip.sample_rate_hz() == target_rate_hz || clip.is_empty() {
        return AudioClip::from_parts_unchecked(clip.samples().to_vec(), target_rate_hz);
    }
    let x = clip.samples();
    let ratio = to / from;
    let cutoff = ratio.min(1.0);
    let half_width = HALF_ZEROS / cutoff;
    let out_len = (x.len() as f64 * ratio).round() as usize;
    let out = (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let u = t - k as f64;
                let w = 0.5 + 0.5 * (PI * u / half_width).cos();
                acc += xk * cutoff * sinc(cutoff * u) * w;
            }
            acc
        })
        .collect();
    AudioClip::from_parts_unchecked(out, target_rate_hz)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    #[test]
    fn upsampled_tone_matches_analytic_tone() {
        let clip = AudioClip::new(tone(440.0, 8000, 4000), 8000).unwrap();
        let up = resample(&clip, 16_000);
        assert_eq!(up.len(), 8000);
        let reference = tone(440.0, 16_000, 8000);
        // ignore edge transients
        let err = up.samples()[200..7800]
            .iter()
            .zip(&reference[200..7800])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 5e-3, "err {err}");
    }

    #[test]
    fn downsampling_removes_content_above_new_nyquist() {
        let clip = AudioClip::new(tone(7000.0, 22_050, 22_050), 22_050).unwrap();
        let down = resample(&clip, 8000);
        assert!(down.samples()[500..7500].iter().all(|s| s.abs() < 0.05));
    }
}
