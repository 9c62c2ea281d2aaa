//! Finite-difference check of the full joint objective on a tiny dual-head
//! model with fusion and a trainable loss weight.

use crate::audio::{synth_noise, synth_utterance, NoiseKind, SynthSpec};
use crate::loss::{ctc_loss, cross_entropy, joint_loss, Label, LossWeight, PAPER_ALPHA};
use crate::model::{ConvLayer, Model, ModelConfig};
use crate::tensor::{GradCheck, GradCheckReport, ParamStore, TensorError};
use crate::textnorm::Vocab;

/// Threshold the check must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        conv_stack: vec![
            ConvLayer::new(4, 10, 5),
            ConvLayer::new(4, 8, 4),
            ConvLayer::new(4, 4, 4),
        ],
        model_dim: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        vocab_size,
        noise_head_enabled: true,
        fusion_enabled: true,
    }
}

/// Model and loss-weight parameters in one store, plus the model.
pub fn tiny_setup(seed: u64) -> Result<(Model, ParamStore), TensorError> {
    let vocab = Vocab::synthetic(SynthSpec::default().letters);
    let model = Model::new(tiny_config(vocab.len()), seed)
        .map_err(|e| TensorError::GradCheck(e.to_string()))?;
    let mut store = model.params().clone();
    let weight = LossWeight::trainable(PAPER_ALPHA).map_err(|e| TensorError::GradCheck(e.to_string()))?;
    for p in weight.params().expect("trainable weight has parameters").iter() {
        store.insert(p.clone())?;
    }
    Ok((model, store))
}

/// Summed joint loss over one speech and one noise utterance, checked
/// against central differences at `eps = 1e-5`.
pub fn joint_gradcheck(seed: u64, corrupt: bool) -> Result<GradCheckReport, TensorError> {
    let spec = SynthSpec::default();
    let vocab = Vocab::synthetic(spec.letters);
    let wrap = |e: &dyn std::fmt::Display| TensorError::GradCheck(e.to_string());
    let text = "ab|c";
    let speech = synth_utterance(text, &spec, seed).map_err(|e| wrap(&e))?;
    let noise = synth_noise(NoiseKind::Babble, 0.12, &spec, seed ^ 1).map_err(|e| wrap(&e))?;
    let target = vocab.encode(text).map_err(|e| wrap(&e))?;
    let items = [(speech, target, Label::Speech), (noise, Vec::new(), Label::Noise)];
    let (model, store) = tiny_setup(seed)?;
    let weight = LossWeight::trainable(PAPER_ALPHA).map_err(|e| wrap(&e))?;

    GradCheck { corrupt, ..GradCheck::default() }.run(&store, |tape, bound| {
        let rho = bound.var(crate::loss::RHO_NAME)?;
        let alpha = weight.alpha_var(tape, Some(rho));
        let mut total = None;
        for (clip, target, label) in &items {
            let out = model.forward(bound, clip).map_err(|e| wrap(&e))?;
            let l_ctc = ctc_loss(out.ctc_log_probs, target).map_err(|e| wrap(&e))?;
            let probs = out.noise_probs.expect("tiny model has a noise head");
            let l_ce = cross_entropy(probs, *label).map_err(|e| wrap(&e))?;
            let (l, _) = joint_loss(l_ctc, Some(l_ce), alpha).map_err(|e| wrap(&e))?;
            total = Some(match total {
                None => l,
                Some(t) => l.add(t)?,
            });
        }
        Ok(total.expect("two utterances"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_is_small() {
        let (_, store) = tiny_setup(0).unwrap();
        assert!(store.numel() <= 5000, "{}", store.numel());
        assert!(store.get("fusion.weight").is_some());
        assert!(store.get("noise_head.weight").is_some());
        assert!(store.get(crate::loss::RHO_NAME).is_some());
    }

    #[test]
    fn joint_gradients_match_differences() {
        let r = joint_gradcheck(0, false).unwrap();
        assert!(r.max_rel_error <= GRADCHECK_TOLERANCE, "{r:?}");
        let again = joint_gradcheck(0, false).unwrap();
        assert_eq!(r.max_rel_error.to_bits(), again.max_rel_error.to_bits());
    }

    #[test]
    fn corruption_is_caught() {
        let r = joint_gradcheck(0, true).unwrap();
        assert!(r.max_rel_error > GRADCHECK_TOLERANCE);
    }
}
