use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AudioClip, AudioError, SAMPLE_RATE};
use crate::textnorm::PIPE;

/// Tone-alphabet parameters: letter `i` is a pure tone at
/// `base_hz + i * step_hz`, the pipe is silence.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub letters: usize,
    pub base_hz: f64,
    pub step_hz: f64,
    pub char_ms: f64,
    pub ramp_ms: f64,
    pub amplitude: f64,
    pub sample_rate: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            letters: 8,
            base_hz: 400.0,
            step_hz: 200.0,
            char_ms: 50.0,
            ramp_ms: 5.0,
            amplitude: 0.3,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), AudioError> {
        let bad = |m: String| Err(AudioError::InvalidSpec(m));
        if self.letters == 0 || self.letters > 26 {
            return bad(format!("letters must be in 1..=26, got {}", self.letters));
        }
        if self.sample_rate == 0 || self.base_hz <= 0.0 || self.step_hz <= 0.0 {
            return bad("frequencies and sample rate must be positive".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.max_hz() >= nyquist {
            return bad(format!(
                "highest letter frequency {} Hz is not below Nyquist {nyquist} Hz",
                self.max_hz()
            ));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return bad(format!("amplitude {} outside (0, 1]", self.amplitude));
        }
        if self.char_samples() == 0 || 2.0 * self.ramp_ms > self.char_ms {
            return bad("character must be longer than its two ramps".into());
        }
        Ok(())
    }

    pub fn max_hz(&self) -> f64 {
        self.base_hz + (self.letters - 1) as f64 * self.step_hz
    }

    pub fn char_samples(&self) -> usize {
        (self.char_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    fn ramp_samples(&self) -> usize {
        (self.ramp_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Tone frequency of a letter, `None` for characters outside the alphabet.
    pub fn frequency(&self, ch: char) -> Option<f64> {
        let idx = (ch as u32).checked_sub('a' as u32)? as usize;
        (idx < self.letters).then(|| self.base_hz + idx as f64 * self.step_hz)
    }

    /// All letter frequencies in alphabet order.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.letters)
            .map(|i| self.base_hz + i as f64 * self.step_hz)
            .collect()
    }
}

/// Renders normalized text as a tone sequence, one `char_ms` slot per
/// character. Each tone gets a random start phase drawn from `seed`.
pub fn synth_utterance(text: &str, spec: &SynthSpec, seed: u64) -> Result<AudioClip, AudioError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.char_samples();
    let ramp = spec.ramp_samples();
    let sr = spec.sample_rate as f64;
    let mut samples = Vec::with_capacity(n * text.chars().count());
    for ch in text.chars() {
        if ch == PIPE {
            samples.extend(std::iter::repeat(0.0).take(n));
            continue;
        }
        let freq = spec.frequency(ch).ok_or(AudioError::OutOfAlphabet(ch))?;
        let phase: f64 = rng.gen_range(0.0..2.0 * PI);
        for i in 0..n {
            let env = envelope(i, n, ramp);
            samples.push(spec.amplitude * env * (2.0 * PI * freq * i as f64 / sr + phase).sin());
        }
    }
    AudioClip::new(samples, spec.sample_rate)
}

/// Raised-cosine on/off ramps of `ramp` samples at both ends of an `n`-sample slot.
fn envelope(i: usize, n: usize, ramp: usize) -> f64 {
    if ramp == 0 {
        return 1.0;
    }
    let edge = i.min(n - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 * (1.0 - (PI * edge as f64 / ramp as f64).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    White,
    Babble,
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Babble, NoiseKind::Hum];

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Babble => "babble",
            NoiseKind::Hum => "hum",
        }
    }
}

impl FromStr for NoiseKind {
    type Err = AudioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "white" => Ok(NoiseKind::White),
            "babble" => Ok(NoiseKind::Babble),
            "hum" => Ok(NoiseKind::Hum),
            other => Err(AudioError::UnknownNoiseKind(other.to_string())),
        }
    }
}

const NOISE_PEAK: f64 = 0.3;
const HUM_HZ: f64 = 50.0;

/// Non-speech clip, peak-normalized to 0.3.
///
/// * white: i.i.d. uniform samples
/// * babble: three tones half a letter step (100 Hz by default) above
///   randomly chosen letter tones
/// * hum: 50 Hz with harmonics at 100, 150 and 200 Hz
pub fn synth_noise(
    kind: NoiseKind,
    duration_s: f64,
    spec: &SynthSpec,
    seed: u64,
) -> Result<AudioClip, AudioError> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(AudioError::BadDuration(duration_s));
    }
    spec.validate()?;
    let sr = spec.sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    if n == 0 {
        return Err(AudioError::BadDuration(duration_s));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tones: Vec<(f64, f64, f64)> = match kind {
        NoiseKind::White => Vec::new(),
        NoiseKind::Babble => (0..3)
            .map(|_| {
                let k = rng.gen_range(0..spec.letters) as f64;
                let freq = spec.base_hz + k * spec.step_hz + spec.step_hz / 2.0;
                (freq, rng.gen_range(0.5..1.0), rng.gen_range(0.0..2.0 * PI))
            })
            .collect(),
        NoiseKind::Hum => (1..=4)
            .map(|h| {
                (
                    HUM_HZ * h as f64,
                    1.0 / h as f64,
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect(),
    };
    let mut samples: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        _ => (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                tones
                    .iter()
                    .map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                    .sum()
            })
            .collect(),
    };
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        for s in &mut samples {
            *s *= NOISE_PEAK / peak;
        }
    }
    AudioClip::new(samples, spec.sample_rate)
}

/// Adds `noise` to `speech` at the requested SNR (mean-square based).
///
/// Noise shorter than the speech is tiled. Returns the mixed clip and the
/// gain applied to the noise; the mix is re-normalized to peak 1 if it clips.
pub fn mix_at_snr(
    speech: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
) -> Result<(AudioClip, f64), AudioError> {
    if speech.sample_rate() != noise.sample_rate() {
        return Err(AudioError::Mix(format!(
            "sample rates differ: {} vs {}",
            speech.sample_rate(),
            noise.sample_rate()
        )));
    }
    if noise.is_empty() {
        return Err(AudioError::Mix("noise clip is empty".into()));
    }
    let ps = speech.power();
    if ps == 0.0 {
        return Err(AudioError::Mix("speech is silent".into()));
    }
    let tiled: Vec<f64> = noise
        .samples()
        .iter()
        .copied()
        .cycle()
        .take(speech.len())
        .collect();
    let pn = tiled.iter().map(|s| s * s).sum::<f64>() / tiled.len() as f64;
    if pn == 0.0 {
        return Err(AudioError::Mix("noise is silent".into()));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut mixed: Vec<f64> = speech
        .samples()
        .iter()
        .zip(&tiled)
        .map(|(s, n)| s + gain * n)
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 1.0 {
        for s in &mut mixed {
            *s /= peak;
        }
    }
    Ok((AudioClip::new(mixed, speech.sample_rate())?, gain))
}

/// Power of a single frequency component (Goertzel recursion).
pub fn goertzel_power(samples: &[f64], freq: f64, sample_rate: u32) -> f64 {
    let coeff = 2.0 * (2.0 * PI * freq / sample_rate as f64).cos();
    let (mut s1, mut s2) = (0.0, 0.0);
    for &x in samples {
        let s0 = x + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    s1 * s1 + s2 * s2 - coeff * s1 * s2
}
