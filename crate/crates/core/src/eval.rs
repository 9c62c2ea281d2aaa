//! Greedy CTC decoding, WER/CER, and speech/noise accuracy.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Utterance;
use crate::loss::Label;
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;
use crate::textnorm::{Vocab, BLANK_ID, PIPE};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference transcript is empty")]
    EmptyReference,
    #[error("cannot evaluate an empty {0} split")]
    EmptySplit(&'static str),
    #[error("{path}: {source}")]
    Model {
        path: String,
        #[source]
        source: ModelError,
    },
}

/// Per-frame argmax (lowest id wins ties), collapse repeats, drop blanks.
pub fn greedy_ids(log_probs: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for r in 0..log_probs.rows() {
        let row = log_probs.row(r);
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
        if Some(best) != prev && best != BLANK_ID {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

pub fn greedy_decode(log_probs: &Tensor, vocab: &Vocab) -> String {
    greedy_ids(log_probs)
        .into_iter()
        .filter_map(|id| vocab.symbol(id))
        .collect()
}

/// Levenshtein distance with unit costs, two-row DP.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Pipe-delimited words; empty pieces are ignored.
pub fn words(text: &str) -> Vec<&str> {
    text.split(PIPE).filter(|w| !w.is_empty()).collect()
}

/// (edit distance, reference length) over words.
pub fn word_errors(reference: &str, hypothesis: &str) -> (usize, usize) {
    let r = words(reference);
    (edit_distance(&r, &words(hypothesis)), r.len())
}

/// (edit distance, reference length) over characters, pipes included.
pub fn char_errors(reference: &str, hypothesis: &str) -> (usize, usize) {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    (edit_distance(&r, &h), r.len())
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<f64, EvalError> {
    match word_errors(reference, hypothesis) {
        (_, 0) => Err(EvalError::EmptyReference),
        (d, n) => Ok(d as f64 / n as f64),
    }
}

pub fn cer(reference: &str, hypothesis: &str) -> Result<f64, EvalError> {
    match char_errors(reference, hypothesis) {
        (_, 0) => Err(EvalError::EmptyReference),
        (d, n) => Ok(d as f64 / n as f64),
    }
}

/// A decoded transcript with no letter (empty, or pipes only) counts as noise.
pub fn infer_noise_from_transcript(decoded: &str) -> Label {
    if decoded.chars().all(|c| c == PIPE) {
        Label::Noise
    } else {
        Label::Speech
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: String,
    /// Headline accuracy: noise head argmax when present, else the transcript rule.
    pub noise_accuracy: f64,
    /// Accuracy of the empty-transcript rule, reported for every model.
    pub transcript_rule_accuracy: f64,
    pub wer: f64,
    pub cer: f64,
    pub n_speech_eval: usize,
    pub n_noise_eval: usize,
    pub alpha_final: Option<f64>,
}

/// Per-utterance scoring result.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub decoded: String,
    pub head_label: Option<Label>,
}

fn score(model: &Model, vocab: &Vocab, utt: &Utterance) -> Result<Scored, EvalError> {
    let out = model.infer(&utt.clip).map_err(|source| EvalError::Model {
        path: utt.entry.audio_path.clone(),
        source,
    })?;
    // ties favour speech
    let head_label = out
        .noise_probs
        .map(|p| if p[1] > p[0] { Label::Noise } else { Label::Speech });
    Ok(Scored {
        decoded: greedy_decode(&out.ctc_log_probs, vocab),
        head_label,
    })
}

/// Scores utterances in parallel; output order matches input order.
pub fn score_all(model: &Model, vocab: &Vocab, utts: &[Utterance]) -> Result<Vec<Scored>, EvalError> {
    utts.par_iter().map(|u| score(model, vocab, u)).collect()
}

/// Corpus-level (pooled) WER of speech utterances only.
pub fn corpus_wer(model: &Model, vocab: &Vocab, speech: &[Utterance]) -> Result<f64, EvalError> {
    if speech.is_empty() {
        return Err(EvalError::EmptySplit("speech"));
    }
    let scored = score_all(model, vocab, speech)?;
    let (d, n) = speech
        .iter()
        .zip(&scored)
        .map(|(u, s)| word_errors(&u.entry.transcript, &s.decoded))
        .fold((0, 0), |(a, b), (d, n)| (a + d, b + n));
    if n == 0 {
        return Err(EvalError::EmptyReference);
    }
    Ok(d as f64 / n as f64)
}

/// WER/CER pooled over `speech`; noise accuracy over `speech` + `noise`.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    speech: &[Utterance],
    noise: &[Utterance],
    config_name: &str,
) -> Result<MetricsReport, EvalError> {
    if speech.is_empty() {
        return Err(EvalError::EmptySplit("speech"));
    }
    if noise.is_empty() {
        return Err(EvalError::EmptySplit("noise"));
    }
    let speech_scores = score_all(model, vocab, speech)?;
    let noise_scores = score_all(model, vocab, noise)?;

    let (mut wd, mut wn, mut cd, mut cn) = (0, 0, 0, 0);
    for (u, s) in speech.iter().zip(&speech_scores) {
        let (d, n) = word_errors(&u.entry.transcript, &s.decoded);
        wd += d;
        wn += n;
        let (d, n) = char_errors(&u.entry.transcript, &s.decoded);
        cd += d;
        cn += n;
    }
    if wn == 0 || cn == 0 {
        return Err(EvalError::EmptyReference);
    }

    let total = speech.len() + noise.len();
    let labelled = speech_scores
        .iter()
        .map(|s| (s, Label::Speech))
        .chain(noise_scores.iter().map(|s| (s, Label::Noise)));
    let (mut head_ok, mut rule_ok) = (0, 0);
    let mut has_head = true;
    for (s, truth) in labelled {
        let rule = infer_noise_from_transcript(&s.decoded);
        rule_ok += usize::from(rule == truth);
        match s.head_label {
            Some(l) => head_ok += usize::from(l == truth),
            None => has_head = false,
        }
    }
    let rule_acc = rule_ok as f64 / total as f64;
    Ok(MetricsReport {
        config: config_name.to_string(),
        noise_accuracy: if has_head {
            head_ok as f64 / total as f64
        } else {
            rule_acc
        },
        transcript_rule_accuracy: rule_acc,
        wer: wd as f64 / wn as f64,
        cer: cd as f64 / cn as f64,
        n_speech_eval: speech.len(),
        n_noise_eval: noise.len(),
        alpha_final: None,
    })
}

/// Plain-text table: Configuration, Noise Acc %, WER %, CER %.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.config.len())
        .chain(std::iter::once("Configuration".len()))
        .max()
        .unwrap_or(13);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>12}  {:>8}  {:>8}",
        "Configuration", "Noise Acc %", "WER %", "CER %"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.2}  {:>8.2}  {:>8.2}",
            r.config,
            100.0 * r.noise_accuracy,
            100.0 * r.wer,
            100.0 * r.cer
        );
    }
    out
}

/// One JSON object per line.
pub fn format_records(reports: &[MetricsReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
        .collect()
}
