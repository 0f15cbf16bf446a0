use std::path::Path;

use super::AudioClip;
use crate::error::{Error, Result};

pub const WAV_SAMPLE_RATE: u32 = 16000;

const FULL_SCALE: f64 = 32768.0;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a 16 kHz mono 16-bit PCM WAV file. Anything else is rejected.
pub fn read_clip(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => format_err(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format_err(
            path,
            format!("expected mono, found {} channels", spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_err(
            path,
            format!(
                "expected 16-bit integer PCM, found {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    if spec.sample_rate != WAV_SAMPLE_RATE {
        return Err(format_err(
            path,
            format!(
                "expected sample rate {WAV_SAMPLE_RATE} Hz, found {} Hz",
                spec.sample_rate
            ),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Writes a clip as 16 kHz mono 16-bit PCM.
pub fn write_clip(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    clip.validate()?;
    if clip.sample_rate != WAV_SAMPLE_RATE {
        return Err(format_err(
            path,
            format!(
                "clips are written at {WAV_SAMPLE_RATE} Hz, this one is {} Hz",
                clip.sample_rate
            ),
        ));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: WAV_SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => format_err(path, other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for s in &clip.samples {
        let q = (s * FULL_SCALE)
            .round()
            .clamp(-FULL_SCALE, FULL_SCALE - 1.0) as i16;
        writer.write_sample(q).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}
