//! Synthetic tone-alphabet corpus written as WAV files plus
//! train/validation/test manifests.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{synth_noise, synth_utterance, write_wav, NoiseKind, SynthSpec};
use crate::dataset::{
    compose_split, manifest_path, noise_count, write_manifest, DatasetError, ManifestEntry,
    SplitName, SplitSpec,
};
use crate::loss::Label;
use crate::textnorm::{Vocab, PIPE};

pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    /// Speech utterances in the training split.
    pub train_utts: usize,
    /// Total utterances per evaluation split (half speech, half noise).
    pub eval_utts: usize,
    /// Noise share of the training split.
    pub noise_fraction: f64,
    pub seed: u64,
    pub synth: SynthSpec,
    pub max_words: usize,
    pub max_word_len: usize,
    /// Noise clip duration range in seconds.
    pub noise_duration: (f64, f64),
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            train_utts: 190,
            eval_utts: 80,
            noise_fraction: SplitName::Train.default_noise_fraction(),
            seed: 0,
            synth: SynthSpec::default(),
            max_words: 2,
            max_word_len: 3,
            noise_duration: (0.1, 0.35),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub speech: usize,
    pub noise: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub train: SplitCounts,
    pub validation: SplitCounts,
    pub test: SplitCounts,
}

/// Independent seed per (split, stream) so splits never share randomness.
fn stream_seed(seed: u64, split: SplitName, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in split.as_str().bytes().chain([b'/']).chain(stream.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// 1..=max_words words of 1..=max_word_len letters; no letter repeats
/// immediately within a word.
pub fn random_transcript<R: Rng>(rng: &mut R, letters: &[char], max_words: usize, max_word_len: usize) -> String {
    let words = rng.gen_range(1..=max_words.max(1));
    let mut out = String::new();
    for w in 0..words {
        if w > 0 {
            out.push(PIPE);
        }
        let len = rng.gen_range(1..=max_word_len.max(1));
        let mut prev = None;
        let mut n = 0;
        while n < len {
            let c = letters[rng.gen_range(0..letters.len())];
            if Some(c) != prev || letters.len() == 1 {
                out.push(c);
                prev = Some(c);
                n += 1;
            }
        }
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Generator<'a> {
    root: &'a Path,
    spec: &'a CorpusSpec,
    letters: Vec<char>,
}

impl Generator<'_> {
    fn speech(&self, split: SplitName, n: usize) -> Result<Vec<ManifestEntry>, DatasetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.spec.seed, split, "speech"));
        (0..n)
            .map(|i| {
                let text = random_transcript(&mut rng, &self.letters, self.spec.max_words, self.spec.max_word_len);
                let clip = synth_utterance(&text, &self.spec.synth, rng.gen())?;
                let rel = format!("audio/{split}/speech_{i:05}.wav");
                write_wav(&self.root.join(&rel), &clip)?;
                Ok(ManifestEntry {
                    audio_path: rel,
                    transcript: text,
                    label: Label::Speech,
                    duration_s: clip.duration_s(),
                })
            })
            .collect()
    }

    /// Kinds cycle white, babble, hum so every split covers all three evenly.
    fn noise(&self, split: SplitName, n: usize) -> Result<Vec<ManifestEntry>, DatasetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.spec.seed, split, "noise"));
        let (lo, hi) = self.spec.noise_duration;
        (0..n)
            .map(|i| {
                let kind = NoiseKind::ALL[i % NoiseKind::ALL.len()];
                let duration = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                let clip = synth_noise(kind, duration, &self.spec.synth, rng.gen())?;
                let rel = format!("audio/{split}/noise_{i:05}_{}.wav", kind.as_str());
                write_wav(&self.root.join(&rel), &clip)?;
                Ok(ManifestEntry {
                    audio_path: rel,
                    transcript: String::new(),
                    label: Label::Noise,
                    duration_s: clip.duration_s(),
                })
            })
            .collect()
    }
}

/// Writes `vocab.txt`, `audio/<split>/*.wav` and `<split>.jsonl` under `out_dir`.
pub fn generate_corpus(out_dir: &Path, spec: &CorpusSpec) -> Result<CorpusSummary, DatasetError> {
    spec.synth.validate()?;
    let train_noise = noise_count(spec.train_utts, spec.noise_fraction)?;
    let vocab = Vocab::synthetic(spec.synth.letters);
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    vocab.save(&out_dir.join(VOCAB_FILE)).map_err(|source| DatasetError::Text {
        path: VOCAB_FILE.into(),
        source,
    })?;
    for split in SplitName::ALL {
        let dir: PathBuf = out_dir.join("audio").join(split.as_str());
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let gen = Generator {
        root: out_dir,
        spec,
        letters: vocab.letters().collect(),
    };

    let mut counts = Vec::new();
    for split in SplitName::ALL {
        let (n_speech, fraction) = match split {
            SplitName::Train => (spec.train_utts, spec.noise_fraction),
            _ => (spec.eval_utts / 2, split.default_noise_fraction()),
        };
        let n_noise = match split {
            SplitName::Train => train_noise,
            _ => noise_count(n_speech, fraction)?,
        };
        let speech = gen.speech(split, n_speech)?;
        let noise = gen.noise(split, n_noise)?;
        let composed = compose_split(
            &speech,
            &noise,
            &SplitSpec {
                name: split,
                noise_fraction: fraction,
                seed: stream_seed(spec.seed, split, "order"),
            },
        )?;
        write_manifest(&manifest_path(out_dir, split), &composed)?;
        counts.push(SplitCounts {
            speech: n_speech,
            noise: n_noise,
        });
    }
    Ok(CorpusSummary {
        train: counts[0],
        validation: counts[1],
        test: counts[2],
    })
}

/// Loads `vocab.txt` from a corpus directory, or the default synthetic
/// alphabet if the file is absent.
pub fn corpus_vocab(data_dir: &Path) -> Result<Vocab, DatasetError> {
    let path = data_dir.join(VOCAB_FILE);
    if path.is_file() {
        Vocab::load(&path).map_err(|source| DatasetError::Text {
            path: path.display().to_string(),
            source,
        })
    } else {
        Ok(Vocab::synthetic(SynthSpec::default().letters))
    }
}
