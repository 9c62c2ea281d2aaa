use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioClip, AudioError};

const FULL_SCALE: f64 = 32768.0;

fn map_err(path: &Path, e: hound::Error) -> AudioError {
    let p = path.display().to_string();
    match e {
        hound::Error::IoError(source) => AudioError::Io { path: p, source },
        other => AudioError::Format {
            path: p,
            reason: other.to_string(),
        },
    }
}

/// Writes 16-bit little-endian PCM, mono.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_err(path, e))?;
    for &s in clip.samples() {
        let q = (s * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(q).map_err(|e| map_err(path, e))?;
    }
    writer.finalize().map_err(|e| map_err(path, e))
}

/// Reads a mono 16-bit PCM file; anything else is a format error.
pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let reader = WavReader::open(path).map_err(|e| map_err(path, e))?;
    let spec = reader.spec();
    let reject = |reason: String| AudioError::Format {
        path: path.display().to_string(),
        reason,
    };
    if spec.channels != 1 {
        return Err(reject(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(reject(format!(
            "{}-bit {:?} samples, expected 16-bit PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| map_err(path, e))?;
    AudioClip::new(samples, spec.sample_rate)
}
