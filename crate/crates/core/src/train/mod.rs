//! Optimizer, training loop and experiment presets.

mod adam;
pub mod config;
pub mod experiment;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{parse_config, render_config, ConfigError};
pub use experiment::{evaluate_split, load_run_checkpoint, run_experiment, run_experiment_for, AlphaMode, ExperimentConfig, Preset, RunOutcome};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{batch_iter, DatasetError, UtteranceSource, Utterance};
use crate::eval::EvalError;
use crate::loss::{ctc_loss, cross_entropy, joint_loss, LossBreakdown, LossError, LossWeight};
use crate::model::{Model, ModelError};
use crate::tensor::{Parameter, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient for `{param}` at index {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("gradient for `{param}` has shape {got:?}, parameter has {expected:?}")]
    GradientShape {
        param: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{grads} gradients for {params} parameters")]
    GradientCount { params: usize, grads: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("utterance {path}: {source}")]
    Utterance {
        path: String,
        #[source]
        source: LossError,
    },
    #[error("utterance {path}: {source}")]
    Forward {
        path: String,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Resume(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Loop hyperparameters. Defaults are the toy-scale values; see
/// [`TrainHyper::paper`] for the published learning rate and epoch count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 300,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn paper() -> Self {
        Self {
            epochs: 30,
            adam: AdamConfig {
                learning_rate: 1e-5,
                ..AdamConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let bad = |m: &str| Err(TrainError::InvalidHyper(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(a.eps > 0.0 && a.eps.is_finite()) {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// Per-epoch record; also the training-log line format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_l_ctc: f64,
    pub mean_l_ce: f64,
    /// `None` when the model has no noise head.
    pub alpha: Option<f64>,
    pub mean_l_total: f64,
    pub validation_wer: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub history: Vec<EpochSummary>,
    /// Alpha after every optimizer step (trainable weights only).
    pub alpha_trajectory: Vec<f64>,
}

impl TrainState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

/// Loss values and gradients (model parameters, then loss-weight parameters)
/// of one utterance.
pub struct UtterancePass {
    pub loss: LossBreakdown,
    pub grads: Vec<Tensor>,
}

/// Forward and backward for one utterance on its own tape.
pub fn utterance_pass(model: &Model, weight: Option<&LossWeight>, utt: &Utterance) -> Result<UtterancePass> {
    let path = || utt.entry.audio_path.clone();
    let tape = Tape::new();
    let bound = model.params().bind(&tape);
    let loss_bound = weight.and_then(LossWeight::params).map(|s| s.bind(&tape));
    let out = model
        .forward(&bound, &utt.clip)
        .map_err(|source| TrainError::Forward { path: path(), source })?;
    let l_ctc = ctc_loss(out.ctc_log_probs, &utt.target)
        .map_err(|source| TrainError::Utterance { path: path(), source })?;
    let (total, loss) = match (out.noise_probs, weight) {
        (Some(probs), Some(w)) => {
            let l_ce = cross_entropy(probs, utt.label())?;
            let alpha = w.alpha_var(&tape, loss_bound.as_ref().map(|b| b.vars()[0]));
            joint_loss(l_ctc, Some(l_ce), alpha)
                .map_err(|source| TrainError::Utterance { path: path(), source })?
        }
        (None, _) => {
            let v = l_ctc.item();
            if !v.is_finite() {
                return Err(TrainError::Utterance {
                    path: path(),
                    source: LossError::NonFinite("l_ctc"),
                });
            }
            let loss = LossBreakdown {
                l_ctc: v,
                l_ce: 0.0,
                alpha: 0.0,
                l_total: v,
            };
            (l_ctc, loss)
        }
        (Some(_), None) => {
            return Err(TrainError::InvalidHyper(
                "a model with a noise head needs a loss weight".into(),
            ))
        }
    };
    let mut grads = tape.backward(total)?;
    let mut out = bound.collect_grads(&mut grads);
    if let Some(b) = &loss_bound {
        out.extend(b.collect_grads(&mut grads));
    }
    Ok(UtterancePass { loss, grads: out })
}

fn optimizer_slots<'a>(model: &'a mut Model, weight: Option<&'a mut LossWeight>) -> Vec<&'a mut Parameter> {
    let mut slots: Vec<&mut Parameter> = model.params_mut().iter_mut().collect();
    if let Some(store) = weight.and_then(LossWeight::params_mut) {
        slots.extend(store.iter_mut());
    }
    slots
}

/// One optimizer step on the mean gradient of `items`. Returns per-item losses.
///
/// Forward passes may run in parallel; gradients are summed in item order so
/// the result does not depend on scheduling.
pub fn train_batch(
    model: &mut Model,
    mut weight: Option<&mut LossWeight>,
    items: &[Utterance],
    hyper: &TrainHyper,
    state: &mut TrainState,
) -> Result<Vec<LossBreakdown>> {
    let passes: Vec<UtterancePass> = {
        let m: &Model = model;
        let w = weight.as_deref();
        items
            .par_iter()
            .map(|u| utterance_pass(m, w, u))
            .collect::<Result<_>>()?
    };
    let n = passes.len() as f64;
    let mut iter = passes.iter();
    let mut sum: Vec<Tensor> = match iter.next() {
        Some(first) => first.grads.clone(),
        None => return Ok(Vec::new()),
    };
    for p in iter {
        for (acc, g) in sum.iter_mut().zip(&p.grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for g in &mut sum {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    let mut slots = optimizer_slots(model, weight.as_deref_mut());
    adam_step(&mut slots, &sum, &mut state.adam, &hyper.adam)?;
    if let Some(w) = weight.as_deref() {
        if w.is_trainable() {
            state.alpha_trajectory.push(w.alpha());
        }
    }
    Ok(passes.into_iter().map(|p| p.loss).collect())
}

/// One pass over `split`: batches in the `(seed, epoch)` order, one optimizer
/// step per batch. Appends and returns the epoch summary.
pub fn train_epoch<S: UtteranceSource + ?Sized>(
    model: &mut Model,
    split: &S,
    mut weight: Option<&mut LossWeight>,
    hyper: &TrainHyper,
    state: &mut TrainState,
) -> Result<EpochSummary> {
    hyper.validate()?;
    let epoch = state.history.len();
    let mut losses = Vec::with_capacity(split.len());
    for batch in batch_iter(split, hyper.batch_size, hyper.seed, epoch)? {
        let batch = batch?;
        losses.extend(train_batch(model, weight.as_deref_mut(), &batch.items, hyper, state)?);
    }
    let n = losses.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / n;
    let summary = EpochSummary {
        epoch: epoch + 1,
        mean_l_ctc: mean(|l| l.l_ctc),
        mean_l_ce: mean(|l| l.l_ce),
        alpha: weight.as_deref().map(LossWeight::alpha),
        mean_l_total: mean(|l| l.l_total),
        validation_wer: None,
    };
    state.history.push(summary.clone());
    Ok(summary)
}
