//! Manifests, split composition with a target noise share, and
//! deterministic batch iteration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{read_wav, AudioClip, AudioError};
use crate::loss::Label;
use crate::textnorm::{TextError, Vocab, PIPE};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("entry `{path}`: {reason}")]
    Invariant { path: String, reason: String },
    #[error("manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("referenced audio file {0} does not exist")]
    MissingAudio(String),
    #[error("noise fraction {0} outside [0, 1)")]
    BadFraction(f64),
    #[error("noise pool has {available} entries but the split needs {required}")]
    InsufficientNoise { required: usize, available: usize },
    #[error("cannot iterate an empty split")]
    EmptySplit,
    #[error("batch size must be at least 1")]
    BadBatchSize,
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("entry `{path}`: {source}")]
    Text {
        path: String,
        #[source]
        source: TextError,
    },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// One utterance record. Noise entries carry an empty transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub audio_path: String,
    pub transcript: String,
    pub label: Label,
    pub duration_s: f64,
}

fn is_normalized(t: &str) -> bool {
    !t.is_empty()
        && t.split(PIPE).all(|w| !w.is_empty())
        && t
            .chars()
            .all(|c| c == PIPE || (c.is_alphanumeric() && !c.is_uppercase()))
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(DatasetError::Invariant {
                path: self.audio_path.clone(),
                reason: reason.to_string(),
            })
        };
        match self.label {
            Label::Noise if !self.transcript.is_empty() => {
                fail("noise entry must have an empty transcript")
            }
            Label::Speech if !is_normalized(&self.transcript) => {
                fail("speech transcript must be non-empty and normalized")
            }
            _ if !(self.duration_s.is_finite() && self.duration_s >= 0.0) => {
                fail("duration must be a finite non-negative number")
            }
            _ => Ok(()),
        }
    }
}

/// Parses line-delimited JSON records; blank lines are skipped.
pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
                path: origin.to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        entry.validate()?;
        out.push(entry);
    }
    Ok(out)
}

pub fn serialize_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }

    /// Default noise share: 5% for training, half for evaluation splits.
    pub fn default_noise_fraction(&self) -> f64 {
        match self {
            SplitName::Train => 0.05,
            _ => 0.5,
        }
    }

    pub fn manifest_file(&self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| DatasetError::UnknownSplit(s.to_string()))
    }
}

pub fn manifest_path(data_dir: &Path, split: SplitName) -> PathBuf {
    data_dir.join(split.manifest_file())
}

/// Reads `<data_dir>/<split>.jsonl` and checks every referenced WAV exists.
pub fn build_manifest(data_dir: &Path, split: SplitName) -> Result<Vec<ManifestEntry>> {
    let path = manifest_path(data_dir, split);
    let text = std::fs::read_to_string(&path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let entries = parse_manifest(&text, &path.display().to_string())?;
    for e in &entries {
        let audio = data_dir.join(&e.audio_path);
        if !audio.is_file() {
            return Err(DatasetError::MissingAudio(audio.display().to_string()));
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, serialize_manifest(entries)).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub name: SplitName,
    pub noise_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(name: SplitName, seed: u64) -> Self {
        Self {
            name,
            noise_fraction: name.default_noise_fraction(),
            seed,
        }
    }
}

/// Noise entries needed so that they form `fraction` of the combined split.
pub fn noise_count(n_speech: usize, fraction: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(DatasetError::BadFraction(fraction));
    }
    Ok((fraction / (1.0 - fraction) * n_speech as f64).round() as usize)
}

/// All speech entries plus `k` noise entries drawn without replacement,
/// then shuffled; both draws are seeded by `spec.seed`.
pub fn compose_split(
    speech: &[ManifestEntry],
    noise: &[ManifestEntry],
    spec: &SplitSpec,
) -> Result<Vec<ManifestEntry>> {
    let k = noise_count(speech.len(), spec.noise_fraction)?;
    if k > noise.len() {
        return Err(DatasetError::InsufficientNoise {
            required: k,
            available: noise.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let picked = rand::seq::index::sample(&mut rng, noise.len(), k);
    let mut out: Vec<ManifestEntry> = speech.to_vec();
    out.extend(picked.into_iter().map(|i| noise[i].clone()));
    out.shuffle(&mut rng);
    Ok(out)
}

/// A decoded utterance ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub entry: ManifestEntry,
    pub clip: AudioClip,
    pub target: Vec<usize>,
}

impl Utterance {
    pub fn label(&self) -> Label {
        self.entry.label
    }
}

pub fn load_utterance(data_dir: &Path, entry: &ManifestEntry, vocab: &Vocab) -> Result<Utterance> {
    let clip = read_wav(&data_dir.join(&entry.audio_path))?;
    let target = vocab
        .encode(&entry.transcript)
        .map_err(|source| DatasetError::Text {
            path: entry.audio_path.clone(),
            source,
        })?;
    Ok(Utterance {
        entry: entry.clone(),
        clip,
        target,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub index: usize,
    pub items: Vec<Utterance>,
}

/// Epoch permutation derived from `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Where batch audio comes from: files under a data directory, or clips
/// already held in memory.
pub trait UtteranceSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, idx: usize) -> Result<Utterance>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Entries resolved against a data directory, decoded on demand.
pub struct DiskSource<'a> {
    pub data_dir: &'a Path,
    pub entries: &'a [ManifestEntry],
    pub vocab: &'a Vocab,
}

impl UtteranceSource for DiskSource<'_> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn load(&self, idx: usize) -> Result<Utterance> {
        load_utterance(self.data_dir, &self.entries[idx], self.vocab)
    }
}

impl UtteranceSource for [Utterance] {
    fn len(&self) -> usize {
        <[Utterance]>::len(self)
    }

    fn load(&self, idx: usize) -> Result<Utterance> {
        Ok(self[idx].clone())
    }
}

impl UtteranceSource for Vec<Utterance> {
    fn len(&self) -> usize {
        <[Utterance]>::len(self)
    }

    fn load(&self, idx: usize) -> Result<Utterance> {
        Ok(self[idx].clone())
    }
}

/// Lazily loaded batches over one epoch.
pub struct BatchIter<'a, S: UtteranceSource + ?Sized> {
    source: &'a S,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

pub fn batch_iter<'a, S: UtteranceSource + ?Sized>(
    source: &'a S,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<BatchIter<'a, S>> {
    if batch_size == 0 {
        return Err(DatasetError::BadBatchSize);
    }
    if source.is_empty() {
        return Err(DatasetError::EmptySplit);
    }
    Ok(BatchIter {
        source,
        order: epoch_order(source.len(), seed, epoch),
        batch_size,
        next: 0,
    })
}

impl<S: UtteranceSource + ?Sized> BatchIter<'_, S> {
    /// Number of batches this epoch.
    pub fn batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<S: UtteranceSource + ?Sized> Iterator for BatchIter<'_, S> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next * self.batch_size;
        if start >= self.order.len() {
            return None;
        }
        let end = (start + self.batch_size).min(self.order.len());
        let items = self.order[start..end]
            .iter()
            .map(|&i| self.source.load(i))
            .collect::<Result<Vec<_>>>();
        let index = self.next;
        self.next += 1;
        Some(items.map(|items| Batch { index, items }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav, SAMPLE_RATE};

    fn speech(i: usize) -> ManifestEntry {
        ManifestEntry {
            audio_path: format!("speech/{i}.wav"),
            transcript: "ab|c".into(),
            label: Label::Speech,
            duration_s: 0.2,
        }
    }

    fn noise(i: usize) -> ManifestEntry {
        ManifestEntry {
            audio_path: format!("noise/{i}.wav"),
            transcript: String::new(),
            label: Label::Noise,
            duration_s: 0.3,
        }
    }

    #[test]
    fn manifest_parse_and_errors() {
        let text = serialize_manifest(&[speech(0), noise(1), speech(2)]);
        let parsed = parse_manifest(&text, "m").unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(serialize_manifest(&parsed), text);

        let bad = "{\"audio_path\":\"x.wav\",\"transcript\":\"ab\",\"label\":\"noise\",\"duration_s\":1}\n";
        assert!(matches!(parse_manifest(bad, "m"), Err(DatasetError::Invariant { .. })));
        let junk = format!("{}not json\n", serialize_manifest(&[speech(0)]));
        match parse_manifest(&junk, "m") {
            Err(DatasetError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let upper = "{\"audio_path\":\"x.wav\",\"transcript\":\"AB\",\"label\":\"speech\",\"duration_s\":1}\n";
        assert!(parse_manifest(upper, "m").is_err());
        let empty_speech = "{\"audio_path\":\"x.wav\",\"transcript\":\"\",\"label\":\"speech\",\"duration_s\":1}\n";
        assert!(parse_manifest(empty_speech, "m").is_err());
    }

    #[test]
    fn build_manifest_checks_audio() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("speech")).unwrap();
        let clip = AudioClip::new(vec![0.0; 10], SAMPLE_RATE).unwrap();
        write_wav(&dir.path().join("speech/0.wav"), &clip).unwrap();
        write_manifest(&manifest_path(dir.path(), SplitName::Train), &[speech(0)]).unwrap();
        assert_eq!(build_manifest(dir.path(), SplitName::Train).unwrap().len(), 1);
        write_manifest(&manifest_path(dir.path(), SplitName::Test), &[speech(0), speech(1)]).unwrap();
        assert!(matches!(
            build_manifest(dir.path(), SplitName::Test),
            Err(DatasetError::MissingAudio(_))
        ));
        assert!(matches!(
            build_manifest(dir.path(), SplitName::Validation),
            Err(DatasetError::Io { .. })
        ));
    }

    #[test]
    fn compose_counts() {
        let sp: Vec<_> = (0..95).map(speech).collect();
        let nz: Vec<_> = (0..40).map(noise).collect();
        let train = compose_split(&sp, &nz, &SplitSpec::new(SplitName::Train, 1)).unwrap();
        assert_eq!(train.len(), 100);
        assert_eq!(train.iter().filter(|e| e.label == Label::Noise).count(), 5);

        let sp50: Vec<_> = (0..50).map(speech).collect();
        let nz50: Vec<_> = (0..50).map(noise).collect();
        let eval = compose_split(&sp50, &nz50, &SplitSpec::new(SplitName::Test, 1)).unwrap();
        assert_eq!(eval.iter().filter(|e| e.label == Label::Noise).count(), 50);
        assert_eq!(eval.len(), 100);

        let none = SplitSpec {
            noise_fraction: 0.0,
            ..SplitSpec::new(SplitName::Train, 1)
        };
        let base = compose_split(&sp, &nz, &none).unwrap();
        assert!(base.iter().all(|e| e.label == Label::Speech));

        match compose_split(&sp50, &nz[..10], &SplitSpec::new(SplitName::Test, 1)) {
            Err(DatasetError::InsufficientNoise { required, .. }) => assert_eq!(required, 50),
            other => panic!("{other:?}"),
        }
        assert!(noise_count(10, 1.0).is_err());
        assert!(noise_count(10, -0.1).is_err());
    }

    #[test]
    fn realized_fraction_within_one_item() {
        let nz: Vec<_> = (0..200).map(noise).collect();
        for n in 1..120 {
            let sp: Vec<_> = (0..n).map(speech).collect();
            for f in [0.05, 0.1, 0.25, 0.5] {
                let spec = SplitSpec {
                    name: SplitName::Train,
                    noise_fraction: f,
                    seed: 3,
                };
                let out = compose_split(&sp, &nz, &spec).unwrap();
                let k = out.iter().filter(|e| e.label == Label::Noise).count();
                let realized = k as f64 / out.len() as f64;
                assert!((realized - f).abs() <= 1.0 / out.len() as f64, "n={n} f={f}");
            }
        }
    }

    fn utterances(n: usize) -> Vec<Utterance> {
        (0..n)
            .map(|i| Utterance {
                entry: speech(i),
                clip: AudioClip::new(vec![0.0; 4], SAMPLE_RATE).unwrap(),
                target: vec![1],
            })
            .collect()
    }

    #[test]
    fn batches_cover_epoch() {
        let data = utterances(10);
        let it = batch_iter(&data, 8, 7, 0).unwrap();
        assert_eq!(it.batches(), 2);
        let sizes: Vec<usize> = it.map(|b| b.unwrap().items.len()).collect();
        assert_eq!(sizes, vec![8, 2]);

        let paths = |epoch| -> Vec<String> {
            batch_iter(&data, 3, 7, epoch)
                .unwrap()
                .flat_map(|b| b.unwrap().items.into_iter().map(|u| u.entry.audio_path))
                .collect()
        };
        assert_eq!(paths(0), paths(0));
        assert_ne!(paths(0), paths(1));
        let mut all = paths(4);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);

        assert!(matches!(batch_iter(&data, 0, 0, 0), Err(DatasetError::BadBatchSize)));
        let empty: Vec<Utterance> = Vec::new();
        assert!(matches!(batch_iter(&empty, 8, 0, 0), Err(DatasetError::EmptySplit)));
    }
}
