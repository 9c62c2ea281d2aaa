//! CTC loss, the speech/noise cross-entropy, and their weighted sum.

use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

use crate::tensor::{ParamStore, Parameter, Tape, Tensor, TensorError, Var, NEG_LARGE};
use crate::textnorm::BLANK_ID;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("CTC target of length {target_len} needs at least {required} frames, got {frames}")]
    Infeasible {
        target_len: usize,
        required: usize,
        frames: usize,
    },
    #[error("CTC target contains the blank id at position {0}")]
    BlankInTarget(usize),
    #[error("CTC target id {id} outside vocabulary of size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("non-finite loss component `{0}`")]
    NonFinite(&'static str),
    #[error("loss weight must be positive and finite, got {0}")]
    BadWeight(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Utterance class; the index matches the noise head's output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Speech = 0,
    Noise = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Minimum frame count for a CTC target: one frame per label plus one
/// separating blank for every adjacent repeat.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `-log P(target | log_probs)` by the blank-interleaved forward recursion,
/// expressed with tape primitives so gradients reach the log-prob table.
///
/// `log_probs` is `[frames, vocab]`. An empty target scores the all-blank path.
pub fn ctc_loss<'t>(log_probs: Var<'t>, target: &[usize]) -> Result<Var<'t>> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "ctc_loss",
            shape,
            reason: "expected [frames, vocab]".into(),
        }
        .into());
    }
    let (frames, vocab) = (shape[0], shape[1]);
    for (pos, &id) in target.iter().enumerate() {
        if id == BLANK_ID {
            return Err(LossError::BlankInTarget(pos));
        }
        if id >= vocab {
            return Err(LossError::TargetOutOfRange { id, vocab });
        }
    }
    let required = ctc_min_frames(target);
    if frames < required {
        return Err(LossError::Infeasible {
            target_len: target.len(),
            required,
            frames,
        });
    }

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK_ID);
    for &l in target {
        ext.push(l);
        ext.push(BLANK_ID);
    }
    let states = ext.len();
    let tape = log_probs.tape();
    let row = |data: Vec<f64>| tape.leaf(Tensor::new(vec![1, data.len()], data).unwrap());

    let emissions = log_probs.gather(&ext)?;
    let init: Vec<f64> = (0..states).map(|s| if s < 2 { 0.0 } else { NEG_LARGE }).collect();
    // skip transition s-2 -> s allowed only into a label differing from the previous label
    let skip: Vec<f64> = (0..states)
        .map(|s| {
            if s >= 2 && ext[s] != BLANK_ID && ext[s] != ext[s - 2] {
                0.0
            } else {
                NEG_LARGE
            }
        })
        .collect();
    let skip = (states > 2).then(|| row(skip[2..].to_vec()));

    let mut alpha = emissions.slice(0, 0, 1)?.add(row(init))?;
    for t in 1..frames {
        let mut acc = alpha;
        if states > 1 {
            let shifted = Var::concat(&[row(vec![NEG_LARGE]), alpha.slice(1, 0, states - 1)?])?;
            acc = acc.logaddexp(shifted)?;
        }
        if let Some(skip) = skip {
            let jumped = alpha.slice(1, 0, states - 2)?.add(skip)?;
            let shifted = Var::concat(&[row(vec![NEG_LARGE; 2]), jumped])?;
            acc = acc.logaddexp(shifted)?;
        }
        alpha = acc.add(emissions.slice(0, t, t + 1)?)?;
    }
    let last = alpha.slice(1, states - 1, states)?;
    let total = if states > 1 {
        last.logaddexp(alpha.slice(1, states - 2, states - 1)?)?
    } else {
        last
    };
    Ok(total.scale(-1.0).sum())
}

pub const PROB_FLOOR: f64 = 1e-12;

static CLAMP_COUNT: AtomicUsize = AtomicUsize::new(0);

/// Number of cross-entropy evaluations that hit the probability floor.
pub fn ce_clamp_count() -> usize {
    CLAMP_COUNT.load(Ordering::Relaxed)
}

/// `-log probs[label]` for `[1, 2]` noise-head probabilities. A probability
/// below 1e-12 is clamped to it (the term then carries no gradient).
pub fn cross_entropy<'t>(probs: Var<'t>, label: Label) -> Result<Var<'t>> {
    let p = probs.slice(1, label.index(), label.index() + 1)?;
    if p.item() < PROB_FLOOR {
        CLAMP_COUNT.fetch_add(1, Ordering::Relaxed);
        log::warn!("cross-entropy probability {} clamped to {PROB_FLOOR}", p.item());
        return Ok(probs.tape().scalar(-PROB_FLOOR.ln()));
    }
    Ok(p.log().scale(-1.0).sum())
}

/// `softplus^{-1}(alpha) = ln(e^alpha - 1)`.
pub fn inverse_softplus(alpha: f64) -> f64 {
    alpha.exp_m1().ln()
}

pub const RHO_NAME: &str = "loss.rho";
pub const PAPER_ALPHA: f64 = 0.01;

/// Weight on the cross-entropy term: a constant, or `softplus(rho)` with a
/// trainable `rho`.
#[derive(Debug, Clone, PartialEq)]
pub enum LossWeight {
    Fixed(f64),
    Trainable(ParamStore),
}

impl LossWeight {
    pub fn fixed(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LossError::BadWeight(alpha));
        }
        Ok(Self::Fixed(alpha))
    }

    /// Trainable weight starting at `alpha`.
    pub fn trainable(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LossError::BadWeight(alpha));
        }
        Self::from_rho(inverse_softplus(alpha))
    }

    pub fn from_rho(rho: f64) -> Result<Self> {
        let mut store = ParamStore::new();
        store.insert(Parameter::new(RHO_NAME, Tensor::scalar(rho)))?;
        Ok(Self::Trainable(store))
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Self::Trainable(_))
    }

    pub fn rho(&self) -> Option<f64> {
        match self {
            Self::Fixed(_) => None,
            Self::Trainable(s) => Some(s.by_index(0).value().data()[0]),
        }
    }

    /// Current effective alpha.
    pub fn alpha(&self) -> f64 {
        match self {
            Self::Fixed(a) => *a,
            Self::Trainable(_) => {
                let rho = self.rho().unwrap();
                rho.max(0.0) + (-rho.abs()).exp().ln_1p()
            }
        }
    }

    /// Parameters the optimizer should update (empty for a fixed weight).
    pub fn params(&self) -> Option<&ParamStore> {
        match self {
            Self::Fixed(_) => None,
            Self::Trainable(s) => Some(s),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamStore> {
        match self {
            Self::Fixed(_) => None,
            Self::Trainable(s) => Some(s),
        }
    }

    /// Alpha as a tape variable: a constant leaf or `softplus(rho)`.
    pub fn alpha_var<'t>(&self, tape: &'t Tape, rho: Option<Var<'t>>) -> Var<'t> {
        match (self, rho) {
            (Self::Trainable(_), Some(r)) => r.softplus(),
            _ => tape.scalar(self.alpha()),
        }
    }
}

/// Scalar values of one joint-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_ce: f64,
    pub alpha: f64,
    pub l_total: f64,
}

/// `l_total = l_ctc + alpha * l_ce`; without a cross-entropy term the total
/// is the CTC loss alone and alpha is only reported.
pub fn joint_loss<'t>(
    l_ctc: Var<'t>,
    l_ce: Option<Var<'t>>,
    alpha: Var<'t>,
) -> Result<(Var<'t>, LossBreakdown)> {
    let ctc = l_ctc.item();
    if !ctc.is_finite() {
        return Err(LossError::NonFinite("l_ctc"));
    }
    let a = alpha.item();
    if !(a.is_finite() && a > 0.0) {
        return Err(LossError::BadWeight(a));
    }
    match l_ce {
        None => Ok((
            l_ctc,
            LossBreakdown {
                l_ctc: ctc,
                l_ce: 0.0,
                alpha: a,
                l_total: ctc,
            },
        )),
        Some(ce_var) => {
            let ce = ce_var.item();
            if !ce.is_finite() {
                return Err(LossError::NonFinite("l_ce"));
            }
            let total = l_ctc.add(alpha.mul(ce_var)?)?;
            Ok((
                total,
                LossBreakdown {
                    l_ctc: ctc,
                    l_ce: ce,
                    alpha: a,
                    l_total: total.item(),
                },
            ))
        }
    }
}
