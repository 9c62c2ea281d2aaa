//! Waveforms, the synthetic tone-alphabet corpus generator, and WAV I/O.

mod synth;
mod wav;

pub use synth::{
    goertzel_power, mix_at_snr, synth_noise, synth_utterance, NoiseKind, SynthSpec,
};
pub use wav::{read_wav, write_wav};

use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("character {0:?} is outside the synthesis alphabet")]
    OutOfAlphabet(char),
    #[error("unknown noise kind `{0}` (expected white, babble or hum)")]
    UnknownNoiseKind(String),
    #[error("noise duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("cannot mix: {0}")]
    Mix(String),
    #[error("unsupported WAV format in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidClip("sample rate must be positive".into()));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(AudioError::InvalidClip(format!(
                "sample {i} = {s} is not a finite value in [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
        }
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}
