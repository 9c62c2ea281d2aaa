//! End-to-end runs on a tiny corpus: artifacts, log format, determinism and
//! resuming an interrupted run.

use std::fs;
use std::path::Path;

use noiseaware::corpus::{generate_corpus, CorpusSpec};
use noiseaware::train::experiment::{CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, REPORT_FILE};
use noiseaware::train::{run_experiment, run_experiment_for, ExperimentConfig, Preset};

fn corpus(dir: &Path) {
    let spec = CorpusSpec {
        train_utts: 10,
        eval_utts: 6,
        noise_fraction: 0.2,
        seed: 5,
        ..CorpusSpec::default()
    };
    generate_corpus(dir, &spec).unwrap();
}

fn quick(preset: Preset, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(preset).with_seed(7);
    cfg.hyper.epochs = epochs;
    cfg.hyper.batch_size = 4;
    cfg
}

#[test]
fn run_writes_artifacts_and_log() {
    let data = tempfile::tempdir().unwrap();
    corpus(data.path());
    let out = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&quick(Preset::C, 3), data.path(), out.path()).unwrap();
    for f in [CHECKPOINT_FILE, LOG_FILE, REPORT_FILE, CONFIG_FILE] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
    assert!(!out.path().join("resume.json").exists());

    let log = fs::read_to_string(out.path().join(LOG_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], i + 1);
        for k in ["mean_l_ctc", "mean_l_ce", "alpha", "mean_l_total", "validation_wer"] {
            assert!(l[k].is_number(), "{k} in {l}");
        }
        assert!(l["alpha"].as_f64().unwrap() > 0.0);
    }
    // 12 train items in batches of 4
    assert_eq!(outcome.alpha_trajectory.len(), 9);
    assert!(outcome.alpha_trajectory.iter().all(|a| *a > 0.0));
    let a = outcome.report.alpha_final.unwrap();
    assert!(a > 0.0 && a != 0.01);
    assert_eq!(outcome.report.n_speech_eval, 3);
    assert_eq!(outcome.report.n_noise_eval, 3);
}

#[test]
fn fixed_alpha_and_transcript_rule() {
    let data = tempfile::tempdir().unwrap();
    corpus(data.path());
    let out = tempfile::tempdir().unwrap();
    let b = run_experiment(&quick(Preset::B, 1), data.path(), &out.path().join("b")).unwrap();
    assert_eq!(b.report.alpha_final, Some(0.01));
    let base = run_experiment(&quick(Preset::Baseline, 1), data.path(), &out.path().join("base")).unwrap();
    assert_eq!(base.report.alpha_final, None);
    assert_eq!(base.report.noise_accuracy, base.report.transcript_rule_accuracy);
    assert!(base.history.iter().all(|h| h.mean_l_ce == 0.0));
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let data = tempfile::tempdir().unwrap();
    corpus(data.path());
    let out = tempfile::tempdir().unwrap();
    let cfg = quick(Preset::D, 2);
    run_experiment(&cfg, data.path(), &out.path().join("1")).unwrap();
    run_experiment(&cfg, data.path(), &out.path().join("2")).unwrap();
    for f in [CHECKPOINT_FILE, REPORT_FILE, LOG_FILE] {
        assert_eq!(
            fs::read(out.path().join("1").join(f)).unwrap(),
            fs::read(out.path().join("2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let data = tempfile::tempdir().unwrap();
    corpus(data.path());
    let out = tempfile::tempdir().unwrap();
    let cfg = quick(Preset::C, 4);
    let straight = run_experiment(&cfg, data.path(), &out.path().join("straight")).unwrap();

    let split = out.path().join("split");
    assert!(run_experiment_for(&cfg, data.path(), &split, 1).unwrap().is_none());
    assert!(split.join("resume.json").is_file());
    assert!(run_experiment_for(&cfg, data.path(), &split, 2).unwrap().is_none());
    let resumed = run_experiment_for(&cfg, data.path(), &split, 5).unwrap().unwrap();

    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.alpha_trajectory, straight.alpha_trajectory);
    assert_eq!(resumed.report, straight.report);
    for f in [CHECKPOINT_FILE, REPORT_FILE, LOG_FILE] {
        assert_eq!(
            fs::read(split.join(f)).unwrap(),
            fs::read(out.path().join("straight").join(f)).unwrap(),
            "{f}"
        );
    }

    let mut other = cfg.clone();
    other.hyper.epochs = 6;
    let dir = out.path().join("mismatch");
    run_experiment_for(&cfg, data.path(), &dir, 1).unwrap();
    assert!(run_experiment(&other, data.path(), &dir).is_err());
}

#[test]
fn missing_manifest_names_the_path() {
    let empty = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = run_experiment(&quick(Preset::B, 1), empty.path(), out.path()).unwrap_err();
    assert!(err.to_string().contains("train.jsonl"), "{err}");
}
