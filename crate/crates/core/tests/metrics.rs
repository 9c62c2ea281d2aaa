//! Edit distance against an independent full-matrix oracle, metric axioms,
//! decoding and text normalization properties.

use noiseaware::audio::{synth_utterance, SynthSpec};
use noiseaware::dataset::{ManifestEntry, Utterance};
use noiseaware::eval::{cer, corpus_wer, edit_distance, greedy_decode, wer, word_errors};
use noiseaware::loss::Label;
use noiseaware::model::Model;
use noiseaware::tensor::Tensor;
use noiseaware::textnorm::{normalize_transcript, Mode, Vocab};
use noiseaware::verify::tiny_config;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full (n+1)x(m+1) Levenshtein table.
fn oracle(a: &[char], b: &[char]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn random_string(rng: &mut ChaCha8Rng) -> Vec<char> {
    let len = rng.gen_range(0..15);
    (0..len).map(|_| (b'a' + rng.gen_range(0..4)) as char).collect()
}

#[test]
fn edit_distance_matches_oracle_on_100_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let a = random_string(&mut rng);
        let b = random_string(&mut rng);
        assert_eq!(edit_distance(&a, &b), oracle(&a, &b), "{a:?} {b:?}");
    }
}

#[test]
fn textbook_cases() {
    let k: Vec<char> = "kitten".chars().collect();
    let s: Vec<char> = "sitting".chars().collect();
    assert_eq!(edit_distance(&k, &s), 3);
    assert_eq!(edit_distance(&k, &k), 0);
    assert_eq!(wer("a|b|c", "a|b|c").unwrap(), 0.0);
    assert_eq!(cer("kitten", "sitting").unwrap(), 0.5);
    assert_eq!(word_errors("the|cat", "the|hat|sat"), (2, 2));
}

#[test]
fn metric_axioms_on_50_seeds() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (random_string(&mut rng), random_string(&mut rng), random_string(&mut rng));
        assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        assert_eq!(edit_distance(&a, &b) == 0, a == b);
        assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
    }
}

#[test]
fn uniform_rows_decode_to_nothing() {
    let vocab = Vocab::synthetic(8);
    for frames in 1..6 {
        let v = vocab.len();
        let t = Tensor::new(vec![frames, v], vec![-(v as f64).ln(); frames * v]).unwrap();
        assert_eq!(greedy_decode(&t, &vocab), "");
    }
}

#[test]
fn corpus_wer_ignores_order() {
    let spec = SynthSpec::default();
    let vocab = Vocab::synthetic(spec.letters);
    let model = Model::new(tiny_config(vocab.len()), 3).unwrap();
    let letters: Vec<char> = vocab.letters().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut utts: Vec<Utterance> = (0..12)
        .map(|i| {
            let text = noiseaware::corpus::random_transcript(&mut rng, &letters, 2, 3);
            Utterance {
                entry: ManifestEntry {
                    audio_path: format!("{i}.wav"),
                    transcript: text.clone(),
                    label: Label::Speech,
                    duration_s: 0.0,
                },
                clip: synth_utterance(&text, &spec, i).unwrap(),
                target: vocab.encode(&text).unwrap(),
            }
        })
        .collect();
    let before = corpus_wer(&model, &vocab, &utts).unwrap();
    utts.shuffle(&mut rng);
    assert_eq!(corpus_wer(&model, &vocab, &utts).unwrap(), before);
}

proptest! {
    #[test]
    fn normalization_closure_idempotence_round_trip(raw in "[A-Za-z0-9 .,!?'|-]{0,40}") {
        let vocab = Vocab::english();
        let n = normalize_transcript(&raw, &vocab, Mode::Lenient).unwrap();
        prop_assert!(n.chars().all(|c| vocab.contains(c)));
        prop_assert_eq!(normalize_transcript(&n, &vocab, Mode::Lenient).unwrap(), n.clone());
        prop_assert_eq!(vocab.decode(&vocab.encode(&n).unwrap()).unwrap(), n);
    }

    #[test]
    fn edit_distance_bounds(a in "[ab]{0,12}", b in "[ab]{0,12}") {
        let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        let d = edit_distance(&a, &b);
        prop_assert!(d >= a.len().abs_diff(b.len()));
        prop_assert!(d <= a.len().max(b.len()));
        prop_assert_eq!(d, oracle(&a, &b));
    }
}
