//! Miniature wav2vec2-style recognizer: strided conv feature extractor,
//! pre-norm transformer encoder, a per-frame CTC head, and an optional
//! utterance-level speech/noise head. With fusion enabled both heads read a
//! learned projection of `[conv features + positions ; encoder context]`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::AudioClip;
use crate::tensor::{Bound, ParamStore, Parameter, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {samples} samples; the conv stack needs at least {minimum}")]
    InputTooShort { samples: usize, minimum: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("fusion inputs disagree on frame count: {conv} vs {context}")]
    FrameMismatch { conv: usize, context: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub conv_stack: Vec<ConvLayer>,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub noise_head_enabled: bool,
    pub fusion_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_stack: vec![
                ConvLayer::new(32, 10, 5),
                ConvLayer::new(32, 8, 4),
                ConvLayer::new(32, 4, 4),
            ],
            model_dim: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 64,
            vocab_size: 10,
            noise_head_enabled: false,
            fusion_enabled: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.conv_stack.is_empty() {
            return bad("conv stack is empty");
        }
        if self
            .conv_stack
            .iter()
            .any(|c| c.out_channels == 0 || c.kernel == 0 || c.stride == 0)
        {
            return bad("conv layers need positive channels, kernel and stride");
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad("model_dim must be a positive multiple of heads");
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must include the blank and at least one symbol");
        }
        Ok(())
    }

    /// Frame count after the conv stack, `None` if the input is too short.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        self.conv_stack.iter().try_fold(samples, |len, c| {
            (len >= c.kernel).then(|| (len - c.kernel) / c.stride + 1)
        })
    }

    /// Smallest input length yielding one output frame.
    pub fn min_samples(&self) -> usize {
        self.conv_stack
            .iter()
            .rev()
            .fold(1, |out, c| (out - 1) * c.stride + c.kernel)
    }

    pub fn num_params(&self) -> usize {
        Model::new(self.clone(), 0).map_or(0, |m| m.params().numel())
    }
}

/// Per-utterance model outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput<'t> {
    /// `[frames, vocab]` log-probabilities.
    pub ctc_log_probs: Var<'t>,
    /// `[1, 2]` probabilities, index 0 = speech, 1 = noise.
    pub noise_probs: Option<Var<'t>>,
    pub frame_count: usize,
}

/// Values of a forward pass without gradient recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub ctc_log_probs: Tensor,
    pub noise_probs: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

/// Stable 64-bit FNV-1a, used to give every parameter its own RNG stream.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn uniform(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Parameter {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Parameter::new(name, Tensor::new(shape.to_vec(), data).expect("valid shape"))
}

impl Model {
    /// Random initialization: uniform in `±sqrt(1/fan_in)` for every conv and
    /// linear layer, unit gain and zero shift for layer norms.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in Self::layout(&config) {
            let p = match fan_in {
                Some(f) => uniform(&name, &shape, f, seed),
                None if name.ends_with(".gamma") => Parameter::new(&name, Tensor::filled(&shape, 1.0)),
                None => Parameter::new(&name, Tensor::zeros(&shape)),
            };
            params.insert(p)?;
        }
        Ok(Self { config, params })
    }

    /// (name, shape, fan-in) for every parameter; fan-in `None` marks layer-norm entries.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Option<usize>)> {
        let mut out = Vec::new();
        let linear = |out: &mut Vec<_>, prefix: String, fan_in: usize, fan_out: usize| {
            out.push((format!("{prefix}.weight"), vec![fan_in, fan_out], Some(fan_in)));
            out.push((format!("{prefix}.bias"), vec![fan_out], Some(fan_in)));
        };
        let norm = |out: &mut Vec<(String, Vec<usize>, Option<usize>)>, prefix: String, d: usize| {
            out.push((format!("{prefix}.gamma"), vec![d], None));
            out.push((format!("{prefix}.beta"), vec![d], None));
        };
        let mut cin = 1;
        for (i, c) in config.conv_stack.iter().enumerate() {
            let fan_in = c.kernel * cin;
            out.push((
                format!("feature_extractor.conv{i}.weight"),
                vec![c.kernel, cin, c.out_channels],
                Some(fan_in),
            ));
            out.push((
                format!("feature_extractor.conv{i}.bias"),
                vec![c.out_channels],
                Some(fan_in),
            ));
            cin = c.out_channels;
        }
        let d = config.model_dim;
        linear(&mut out, "feature_projection".into(), cin, d);
        for l in 0..config.layers {
            let p = format!("encoder.layer{l}");
            norm(&mut out, format!("{p}.attn_norm"), d);
            for m in ["q", "k", "v", "o"] {
                linear(&mut out, format!("{p}.attn.{m}"), d, d);
            }
            norm(&mut out, format!("{p}.ffn_norm"), d);
            linear(&mut out, format!("{p}.ffn.in"), d, config.ffn_dim);
            linear(&mut out, format!("{p}.ffn.out"), config.ffn_dim, d);
        }
        if config.fusion_enabled {
            linear(&mut out, "fusion".into(), 2 * d, d);
        }
        linear(&mut out, "ctc_head".into(), d, config.vocab_size);
        if config.noise_head_enabled {
            linear(&mut out, "noise_head".into(), d, 2);
        }
        out
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if layout.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters for this config, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(params.iter()) {
            if name != p.name() || shape.as_slice() != p.value().shape() {
                return Err(ModelError::Checkpoint(format!(
                    "expected `{name}` {shape:?}, found `{}` {:?}",
                    p.name(),
                    p.value().shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Conv stack with ReLU after every layer: `[samples]` -> `[frames, channels]`.
    pub fn conv_extract<'t>(&self, bound: &Bound<'t, '_>, wave: &AudioClip) -> Result<Var<'t>> {
        let minimum = self.config.min_samples();
        if wave.len() < minimum {
            return Err(ModelError::InputTooShort {
                samples: wave.len(),
                minimum,
            });
        }
        let tape = bound.vars()[0].tape();
        let mut x = tape.leaf(Tensor::new(vec![wave.len(), 1], wave.samples().to_vec())?);
        for i in 0..self.config.conv_stack.len() {
            let w = bound.var(&format!("feature_extractor.conv{i}.weight"))?;
            let b = bound.var(&format!("feature_extractor.conv{i}.bias"))?;
            x = x
                .conv1d(w, self.config.conv_stack[i].stride)?
                .add_row(b)?
                .relu();
        }
        Ok(x)
    }

    /// Linear projection to `model_dim` plus the sinusoidal position table.
    pub fn project_features<'t>(&self, bound: &Bound<'t, '_>, features: Var<'t>) -> Result<Var<'t>> {
        let frames = features.shape()[0];
        let x = linear(bound, "feature_projection", features)?;
        let pos = features.tape().position_table(frames, self.config.model_dim);
        Ok(x.add(pos)?)
    }

    /// Pre-norm transformer blocks.
    pub fn encode_context<'t>(&self, bound: &Bound<'t, '_>, projected: Var<'t>) -> Result<Var<'t>> {
        let mut x = projected;
        for l in 0..self.config.layers {
            let p = format!("encoder.layer{l}");
            let h = norm(bound, &format!("{p}.attn_norm"), x)?;
            let (attn, _) = self.self_attention(bound, &p, h)?;
            x = x.add(attn)?;
            let h = norm(bound, &format!("{p}.ffn_norm"), x)?;
            let h = linear(bound, &format!("{p}.ffn.in"), h)?.relu();
            x = x.add(linear(bound, &format!("{p}.ffn.out"), h)?)?;
        }
        Ok(x)
    }

    /// Multi-head scaled dot-product self-attention; also returns the
    /// per-head `[frames, frames]` attention weights.
    pub(crate) fn self_attention<'t>(
        &self,
        bound: &Bound<'t, '_>,
        prefix: &str,
        h: Var<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let d = self.config.model_dim;
        let dh = d / self.config.heads;
        let q = linear(bound, &format!("{prefix}.attn.q"), h)?;
        let k = linear(bound, &format!("{prefix}.attn.k"), h)?;
        let v = linear(bound, &format!("{prefix}.attn.v"), h)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let (lo, hi) = (i * dh, (i + 1) * dh);
            let qh = q.slice(1, lo, hi)?;
            let kh = k.slice(1, lo, hi)?;
            let vh = v.slice(1, lo, hi)?;
            let w = qh.matmul(kh.transpose()?)?.scale(scale).softmax();
            heads.push(w.matmul(vh)?);
            weights.push(w);
        }
        let merged = Var::concat(&heads)?;
        Ok((linear(bound, &format!("{prefix}.attn.o"), merged)?, weights))
    }

    /// `[conv_projected ; context]` -> learned map back to `model_dim`.
    pub fn fuse<'t>(&self, bound: &Bound<'t, '_>, conv_projected: Var<'t>, context: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (conv_projected.shape()[0], context.shape()[0]);
        if a != b {
            return Err(ModelError::FrameMismatch { conv: a, context: b });
        }
        let cat = Var::concat(&[conv_projected, context])?;
        linear(bound, "fusion", cat)
    }

    pub fn ctc_head<'t>(&self, bound: &Bound<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        Ok(linear(bound, "ctc_head", h)?.log_softmax())
    }

    /// Mean over time, linear to two classes, softmax. `[1, 2]` output.
    pub fn noise_head<'t>(&self, bound: &Bound<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        let pooled = h.mean(0)?;
        Ok(linear(bound, "noise_head", pooled)?.softmax())
    }

    pub fn forward<'t>(&self, bound: &Bound<'t, '_>, wave: &AudioClip) -> Result<ModelOutput<'t>> {
        let features = self.conv_extract(bound, wave)?;
        let projected = self.project_features(bound, features)?;
        let context = self.encode_context(bound, projected)?;
        let h = if self.config.fusion_enabled {
            self.fuse(bound, projected, context)?
        } else {
            context
        };
        let ctc_log_probs = self.ctc_head(bound, h)?;
        let noise_probs = if self.config.noise_head_enabled {
            Some(self.noise_head(bound, h)?)
        } else {
            None
        };
        Ok(ModelOutput {
            ctc_log_probs,
            noise_probs,
            frame_count: features.shape()[0],
        })
    }

    /// Forward pass on a non-recording tape.
    pub fn infer(&self, wave: &AudioClip) -> Result<Inference> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        let out = self.forward(&bound, wave)?;
        let noise_probs = out.noise_probs.map(|p| {
            let v = p.value();
            [v.data()[0], v.data()[1]]
        });
        Ok(Inference {
            ctc_log_probs: (*out.ctc_log_probs.value()).clone(),
            noise_probs,
        })
    }
}

fn linear<'t>(bound: &Bound<'t, '_>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = bound.var(&format!("{prefix}.weight"))?;
    let b = bound.var(&format!("{prefix}.bias"))?;
    Ok(x.matmul(w)?.add_row(b)?)
}

fn norm<'t>(bound: &Bound<'t, '_>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let g = bound.var(&format!("{prefix}.gamma"))?;
    let b = bound.var(&format!("{prefix}.beta"))?;
    Ok(x.layer_norm(g, b)?)
}
