//! The Baseline/A/B/C/D presets and the end-to-end experiment runner.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{render_config, ConfigError};
use super::{train_epoch, EpochSummary, Result, TrainError, TrainHyper, TrainState};
use crate::corpus::corpus_vocab;
use crate::dataset::{
    build_manifest, compose_split, load_utterance, DiskSource, ManifestEntry, SplitName,
    SplitSpec, Utterance,
};
use crate::eval::{corpus_wer, evaluate, format_table, MetricsReport};
use crate::loss::{Label, LossWeight, PAPER_ALPHA};
use crate::model::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamStore, Parameter};
use crate::textnorm::Vocab;

pub const CHECKPOINT_FILE: &str = "best.nawv";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";
pub const CONFIG_FILE: &str = "config.txt";
const RESUME_FILE: &str = "resume.json";
const RESUME_MODEL: &str = "last.nawv";
const RESUME_MOMENTS: &str = "last_moments.nawv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Baseline,
    A,
    B,
    C,
    D,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Baseline, Preset::A, Preset::B, Preset::C, Preset::D];

    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::A => "A",
            Preset::B => "B",
            Preset::C => "C",
            Preset::D => "D",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ConfigError::UnknownPreset(s.to_string()))
    }
}

/// How the cross-entropy term is weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode {
    /// No noise head, no cross-entropy term.
    None,
    Fixed(f64),
    Trainable { init: f64 },
}

impl AlphaMode {
    pub fn kind(&self) -> &'static str {
        match self {
            AlphaMode::None => "none",
            AlphaMode::Fixed(_) => "fixed",
            AlphaMode::Trainable { .. } => "trainable",
        }
    }

    pub fn initial(&self) -> Option<f64> {
        match *self {
            AlphaMode::None => None,
            AlphaMode::Fixed(a) | AlphaMode::Trainable { init: a } => Some(a),
        }
    }

    pub fn loss_weight(&self) -> Result<Option<LossWeight>> {
        Ok(match *self {
            AlphaMode::None => None,
            AlphaMode::Fixed(a) => Some(LossWeight::fixed(a)?),
            AlphaMode::Trainable { init } => Some(LossWeight::trainable(init)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: Preset,
    pub noise_fraction: f64,
    pub noise_head_enabled: bool,
    pub alpha_mode: AlphaMode,
    pub fusion_enabled: bool,
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    /// Validation WER is computed every this many epochs and after the last.
    pub eval_every: usize,
}

impl ExperimentConfig {
    pub fn preset(name: Preset) -> Self {
        let train_fraction = SplitName::Train.default_noise_fraction();
        let (noise_fraction, head, alpha_mode, fusion) = match name {
            Preset::Baseline => (0.0, false, AlphaMode::None, false),
            Preset::A => (train_fraction, false, AlphaMode::None, false),
            Preset::B => (train_fraction, true, AlphaMode::Fixed(PAPER_ALPHA), false),
            Preset::C => (train_fraction, true, AlphaMode::Trainable { init: PAPER_ALPHA }, false),
            Preset::D => (train_fraction, true, AlphaMode::Trainable { init: PAPER_ALPHA }, true),
        };
        Self {
            name,
            noise_fraction,
            noise_head_enabled: head,
            alpha_mode,
            fusion_enabled: fusion,
            model: ModelConfig {
                noise_head_enabled: head,
                fusion_enabled: fusion,
                ..ModelConfig::default()
            },
            hyper: TrainHyper::default(),
            eval_every: 1,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.hyper.seed = seed;
        self
    }

    /// Rejects any preset-defining field that differs from the table.
    pub fn validate(&self) -> Result<()> {
        let p = Self::preset(self.name);
        if self.noise_fraction != p.noise_fraction
            || self.noise_head_enabled != p.noise_head_enabled
            || self.alpha_mode != p.alpha_mode
            || self.fusion_enabled != p.fusion_enabled
            || self.model.noise_head_enabled != p.noise_head_enabled
            || self.model.fusion_enabled != p.fusion_enabled
        {
            return Err(TrainError::InvalidHyper(format!(
                "preset {} fields were modified",
                self.name
            )));
        }
        if self.eval_every == 0 {
            return Err(TrainError::InvalidHyper("eval_every must be positive".into()));
        }
        self.hyper.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// Model topology sized for `vocab`.
    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            ..self.model.clone()
        }
    }
}

/// Artifacts of one finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub history: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub alpha_trajectory: Vec<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResumeState {
    config: String,
    best_wer: Option<f64>,
    best_epoch: usize,
    history: Vec<EpochSummary>,
    alpha_trajectory: Vec<f64>,
    step: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn load_all(data_dir: &Path, entries: &[&ManifestEntry], vocab: &Vocab) -> Result<Vec<Utterance>> {
    Ok(entries
        .iter()
        .map(|e| load_utterance(data_dir, e, vocab))
        .collect::<Result<_, _>>()?)
}

fn by_label(entries: &[ManifestEntry], label: Label) -> Vec<&ManifestEntry> {
    entries.iter().filter(|e| e.label == label).collect()
}

fn extra_params(weight: &Option<LossWeight>) -> ParamStore {
    weight
        .as_ref()
        .and_then(LossWeight::params)
        .cloned()
        .unwrap_or_default()
}

fn restore_weight(mode: &AlphaMode, extra: &ParamStore) -> Result<Option<LossWeight>> {
    match mode {
        AlphaMode::Trainable { .. } => match extra.iter().next() {
            Some(p) => Ok(Some(LossWeight::Trainable({
                let mut s = ParamStore::new();
                s.insert(p.clone())?;
                s
            }))),
            None => Err(TrainError::Resume("checkpoint lacks the loss weight".into())),
        },
        other => other.loss_weight(),
    }
}

fn write_log(path: &Path, history: &[EpochSummary]) -> Result<()> {
    let text: String = history
        .iter()
        .map(|s| serde_json::to_string(s).expect("summary serializes") + "\n")
        .collect();
    fs::write(path, text).map_err(io_err(path))
}

fn save_moments(path: &Path, model: &Model, weight: &Option<LossWeight>, state: &TrainState) -> Result<()> {
    let names: Vec<String> = model
        .params()
        .iter()
        .chain(extra_params(weight).iter())
        .map(|p| p.name().to_string())
        .collect::<Vec<_>>();
    let mut store = ParamStore::new();
    for (i, name) in names.iter().enumerate() {
        if let (Some(m), Some(v)) = (state.adam.m.get(i), state.adam.v.get(i)) {
            store.insert(Parameter::new(format!("m/{name}"), m.clone()))?;
            store.insert(Parameter::new(format!("v/{name}"), v.clone()))?;
        }
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_checkpoint(BufWriter::new(file), store.iter()).map_err(io_err(path))
}

fn load_moments(path: &Path) -> Result<(Vec<crate::tensor::Tensor>, Vec<crate::tensor::Tensor>)> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let store = read_checkpoint(BufReader::new(file))?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in store.iter() {
        if p.name().starts_with("m/") {
            m.push(p.value().clone());
        } else {
            v.push(p.value().clone());
        }
    }
    Ok((m, v))
}

/// Loads a run checkpoint and the loss weight stored beside the model.
pub fn load_run_checkpoint(
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    path: &Path,
) -> Result<(Model, Option<LossWeight>)> {
    let (model, extra) = load_checkpoint(path, &cfg.model_config(vocab))?;
    let weight = restore_weight(&cfg.alpha_mode, &extra)?;
    Ok((model, weight))
}

/// Scores `model` on the speech and noise items of one split.
pub fn evaluate_split(
    model: &Model,
    weight: Option<&LossWeight>,
    vocab: &Vocab,
    data_dir: &Path,
    split: SplitName,
    name: &str,
) -> Result<MetricsReport> {
    let entries = build_manifest(data_dir, split)?;
    let speech = load_all(data_dir, &by_label(&entries, Label::Speech), vocab)?;
    let noise = load_all(data_dir, &by_label(&entries, Label::Noise), vocab)?;
    let mut report = evaluate(model, vocab, &speech, &noise, name)?;
    report.alpha_final = weight.map(LossWeight::alpha);
    Ok(report)
}

struct Best {
    wer: f64,
    epoch: usize,
    model: Model,
    weight: Option<LossWeight>,
}

/// Trains one preset on the corpus in `data_dir`, keeps the checkpoint with
/// the lowest validation WER (later epochs win ties), evaluates it on the
/// test split and writes checkpoint, training log and report to `out_dir`.
///
/// After every epoch the run state is saved; calling again with the same
/// config and directories continues an interrupted run.
pub fn run_experiment(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<RunOutcome> {
    Ok(run_experiment_for(cfg, data_dir, out_dir, usize::MAX)?.expect("unbounded run finishes"))
}

/// Like [`run_experiment`] but trains at most `max_epochs` further epochs in
/// this call. Returns `None` if the run is not finished yet; its state is
/// left in `out_dir` for the next call.
pub fn run_experiment_for(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
    max_epochs: usize,
) -> Result<Option<RunOutcome>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let vocab = corpus_vocab(data_dir)?;
    let model_cfg = cfg.model_config(&vocab);
    let rendered = render_config(cfg);
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, &rendered).map_err(io_err(&config_path))?;

    let train_all = build_manifest(data_dir, SplitName::Train)?;
    let speech: Vec<ManifestEntry> = by_label(&train_all, Label::Speech).into_iter().cloned().collect();
    let noise: Vec<ManifestEntry> = by_label(&train_all, Label::Noise).into_iter().cloned().collect();
    let train = compose_split(
        &speech,
        &noise,
        &SplitSpec {
            name: SplitName::Train,
            noise_fraction: cfg.noise_fraction,
            seed: cfg.hyper.seed,
        },
    )?;
    let validation = build_manifest(data_dir, SplitName::Validation)?;
    let val_speech = load_all(data_dir, &by_label(&validation, Label::Speech), &vocab)?;
    build_manifest(data_dir, SplitName::Test)?;
    log::info!(
        "preset {}: {} train items ({} noise), {} validation speech items",
        cfg.name,
        train.len(),
        train.iter().filter(|e| e.label == Label::Noise).count(),
        val_speech.len()
    );

    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let log_path = out_dir.join(LOG_FILE);
    let resume_path = out_dir.join(RESUME_FILE);
    let resume_model = out_dir.join(RESUME_MODEL);
    let resume_moments = out_dir.join(RESUME_MOMENTS);

    let mut model = Model::new(model_cfg.clone(), cfg.hyper.seed)?;
    let mut weight = cfg.alpha_mode.loss_weight()?;
    let mut state = TrainState::new();
    let mut best: Option<Best> = None;

    if resume_path.is_file() {
        let text = fs::read_to_string(&resume_path).map_err(io_err(&resume_path))?;
        let saved: ResumeState = serde_json::from_str(&text)
            .map_err(|e| TrainError::Resume(format!("{}: {e}", resume_path.display())))?;
        if saved.config != rendered {
            return Err(TrainError::Resume(format!(
                "{} belongs to a different config; remove it to start over",
                resume_path.display()
            )));
        }
        let (m, extra) = load_checkpoint(&resume_model, &model_cfg)?;
        model = m;
        weight = restore_weight(&cfg.alpha_mode, &extra)?;
        let (mm, vv) = load_moments(&resume_moments)?;
        state.adam.m = mm;
        state.adam.v = vv;
        state.adam.step = saved.step;
        state.history = saved.history;
        state.alpha_trajectory = saved.alpha_trajectory;
        if let Some(wer) = saved.best_wer {
            let (bm, bextra) = load_checkpoint(&checkpoint, &model_cfg)?;
            best = Some(Best {
                wer,
                epoch: saved.best_epoch,
                model: bm,
                weight: restore_weight(&cfg.alpha_mode, &bextra)?,
            });
        }
        log::info!("resuming preset {} after epoch {}", cfg.name, state.history.len());
    }

    let source = DiskSource {
        data_dir,
        entries: &train,
        vocab: &vocab,
    };
    let mut budget = max_epochs;
    while state.history.len() < cfg.hyper.epochs {
        if budget == 0 {
            return Ok(None);
        }
        budget -= 1;
        let summary = train_epoch(&mut model, &source, weight.as_mut(), &cfg.hyper, &mut state)?;
        let epoch = summary.epoch;
        if epoch % cfg.eval_every == 0 || epoch == cfg.hyper.epochs {
            let wer = corpus_wer(&model, &vocab, &val_speech)?;
            state.history.last_mut().expect("epoch recorded").validation_wer = Some(wer);
            if best.as_ref().map_or(true, |b| wer <= b.wer) {
                save_checkpoint(&checkpoint, &model, &extra_params(&weight))?;
                best = Some(Best {
                    wer,
                    epoch,
                    model: model.clone(),
                    weight: weight.clone(),
                });
            }
        }
        let last = state.history.last().expect("epoch recorded");
        log::info!(
            "preset {} epoch {epoch}: l_total {:.4} l_ctc {:.4} l_ce {:.4} alpha {} val_wer {}",
            cfg.name,
            last.mean_l_total,
            last.mean_l_ctc,
            last.mean_l_ce,
            last.alpha.map_or("-".into(), |a| format!("{a:.6}")),
            last.validation_wer.map_or("-".into(), |w| format!("{w:.4}"))
        );
        write_log(&log_path, &state.history)?;
        save_checkpoint(&resume_model, &model, &extra_params(&weight))?;
        save_moments(&resume_moments, &model, &weight, &state)?;
        let saved = ResumeState {
            config: rendered.clone(),
            best_wer: best.as_ref().map(|b| b.wer),
            best_epoch: best.as_ref().map_or(0, |b| b.epoch),
            history: state.history.clone(),
            alpha_trajectory: state.alpha_trajectory.clone(),
            step: state.step(),
        };
        let json = serde_json::to_string(&saved).expect("resume state serializes");
        fs::write(&resume_path, json).map_err(io_err(&resume_path))?;
    }

    let best = best.ok_or_else(|| TrainError::InvalidHyper("no epoch was validated".into()))?;
    let report = evaluate_split(
        &best.model,
        best.weight.as_ref(),
        &vocab,
        data_dir,
        SplitName::Test,
        cfg.name.as_str(),
    )?;

    let report_path = out_dir.join(REPORT_FILE);
    let json = serde_json::to_string(&report).expect("report serializes") + "\n";
    fs::write(&report_path, json).map_err(io_err(&report_path))?;
    let table_path = out_dir.join(TABLE_FILE);
    fs::write(&table_path, format_table(std::slice::from_ref(&report))).map_err(io_err(&table_path))?;
    for p in [&resume_path, &resume_model, &resume_moments] {
        fs::remove_file(p).map_err(io_err(p))?;
    }

    Ok(Some(RunOutcome {
        report,
        history: state.history,
        best_epoch: best.epoch,
        alpha_trajectory: state.alpha_trajectory,
        checkpoint,
        log: log_path,
    }))
}
