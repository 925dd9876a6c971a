use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{resample, AudioClip, CANONICAL_RATE_HZ};
use crate::error::{Error, Result};

const I16_SCALE: f64 = 32767.0;

/// Reads a PCM16 or float32 WAV file, averaging channels to mono and
/// resampling to the canonical rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| (v as f64 / I16_SCALE).max(-1.0)))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!("{fmt:?} with {bits} bits per sample")))
        }
    };
    if interleaved.iter().any(|s| !s.is_finite()) {
        return Err(Error::Format("non-finite float sample".into()));
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    if spec.sample_rate < super::MIN_RATE_HZ {
        return Err(Error::Unsupported(format!(
            "sample rate {} Hz",
            spec.sample_rate
        )));
    }
    let clip = AudioClip::new(mono, spec.sample_rate)?;
    if clip.sample_rate_hz() == CANONICAL_RATE_HZ {
        Ok(clip)
    } else {
        Ok(resample(&clip, CANONICAL_RATE_HZ))
    }
}

/// Writes a mono PCM16 little-endian WAV. Samples outside `[-1, 1]` saturate.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for &s in clip.samples() {
        writer.write_sample(encode_i16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

fn encode_i16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * I16_SCALE).round() as i16
}
