//! Flat `key = value` experiment files. `#` starts a comment; keys are the
//! [`ExperimentConfig`] field names.

use std::collections::HashSet;
use std::str::FromStr;

use thiserror::Error;

use super::experiment::{ExperimentConfig, Preset};
use super::TrainHyper;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("line {line}: `{key}` is fixed by preset {preset} and cannot be changed")]
    PresetField {
        line: usize,
        key: String,
        preset: String,
    },
    #[error("missing required key `name`")]
    MissingName,
    #[error("unknown preset `{0}` (expected baseline, A, B, C or D)")]
    UnknownPreset(String),
}

pub const KEYS: &[&str] = &[
    "name",
    "noise_fraction",
    "noise_head_enabled",
    "alpha_mode",
    "alpha_init",
    "fusion_enabled",
    "batch_size",
    "learning_rate",
    "epochs",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "eval_every",
    "paper_hparams",
    "model_dim",
    "layers",
    "heads",
    "ffn_dim",
];

/// Keys whose value is determined by the preset.
const PRESET_KEYS: &[&str] = &[
    "noise_fraction",
    "noise_head_enabled",
    "alpha_mode",
    "alpha_init",
    "fusion_enabled",
];

struct Line<'a> {
    no: usize,
    key: &'a str,
    value: &'a str,
}

fn split_lines(text: &str) -> Result<Vec<Line<'_>>, ConfigError> {
    let mut out: Vec<Line> = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Malformed {
            line: no,
            text: raw.trim().to_string(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Malformed {
                line: no,
                text: raw.trim().to_string(),
            });
        }
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line: no,
                key: key.to_string(),
            });
        }
        if !seen.insert(key) {
            return Err(ConfigError::Duplicate {
                line: no,
                key: key.to_string(),
            });
        }
        out.push(Line { no, key, value });
    }
    Ok(out)
}

fn parse<T: FromStr>(l: &Line) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    l.value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        line: l.no,
        key: l.key.to_string(),
        reason: e.to_string(),
    })
}

/// Parses a config file into the named preset with any overrides applied.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let lines = split_lines(text)?;
    let name = lines
        .iter()
        .find(|l| l.key == "name")
        .ok_or(ConfigError::MissingName)?;
    let preset: Preset = name.value.parse()?;
    let mut cfg = ExperimentConfig::preset(preset);

    if let Some(l) = lines.iter().find(|l| l.key == "paper_hparams") {
        if parse::<bool>(l)? {
            cfg.hyper = TrainHyper {
                seed: cfg.hyper.seed,
                ..TrainHyper::paper()
            };
        }
    }

    for l in &lines {
        if PRESET_KEYS.contains(&l.key) {
            check_preset_field(&cfg, l)?;
            continue;
        }
        match l.key {
            "name" | "paper_hparams" => {}
            "batch_size" => cfg.hyper.batch_size = parse(l)?,
            "learning_rate" => cfg.hyper.adam.learning_rate = parse(l)?,
            "epochs" => cfg.hyper.epochs = parse(l)?,
            "beta1" => cfg.hyper.adam.beta1 = parse(l)?,
            "beta2" => cfg.hyper.adam.beta2 = parse(l)?,
            "eps" => cfg.hyper.adam.eps = parse(l)?,
            "seed" => cfg.hyper.seed = parse(l)?,
            "eval_every" => cfg.eval_every = parse(l)?,
            "model_dim" => cfg.model.model_dim = parse(l)?,
            "layers" => cfg.model.layers = parse(l)?,
            "heads" => cfg.model.heads = parse(l)?,
            "ffn_dim" => cfg.model.ffn_dim = parse(l)?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    Ok(cfg)
}

/// Preset fields may be restated but not changed.
fn check_preset_field(cfg: &ExperimentConfig, l: &Line) -> Result<(), ConfigError> {
    let same = match l.key {
        "noise_fraction" => parse::<f64>(l)? == cfg.noise_fraction,
        "noise_head_enabled" => parse::<bool>(l)? == cfg.noise_head_enabled,
        "fusion_enabled" => parse::<bool>(l)? == cfg.fusion_enabled,
        "alpha_mode" => l.value == cfg.alpha_mode.kind(),
        "alpha_init" => Some(parse::<f64>(l)?) == cfg.alpha_mode.initial(),
        _ => unreachable!(),
    };
    if same {
        Ok(())
    } else {
        Err(ConfigError::PresetField {
            line: l.no,
            key: l.key.to_string(),
            preset: cfg.name.to_string(),
        })
    }
}

/// Renders a config in the same format [`parse_config`] reads.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let mut out = format!(
        "name = {}\nnoise_fraction = {}\nnoise_head_enabled = {}\nalpha_mode = {}\n",
        cfg.name,
        cfg.noise_fraction,
        cfg.noise_head_enabled,
        cfg.alpha_mode.kind()
    );
    if let Some(a) = cfg.alpha_mode.initial() {
        out.push_str(&format!("alpha_init = {a}\n"));
    }
    let h = &cfg.hyper;
    let m = &cfg.model;
    out.push_str(&format!(
        "fusion_enabled = {}\nbatch_size = {}\nlearning_rate = {}\nepochs = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nseed = {}\neval_every = {}\nmodel_dim = {}\nlayers = {}\nheads = {}\nffn_dim = {}\n",
        cfg.fusion_enabled,
        h.batch_size,
        h.adam.learning_rate,
        h.epochs,
        h.adam.beta1,
        h.adam.beta2,
        h.adam.eps,
        h.seed,
        cfg.eval_every,
        m.model_dim,
        m.layers,
        m.heads,
        m.ffn_dim
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::AlphaMode;

    #[test]
    fn minimal_file_is_the_preset() {
        let cfg = parse_config("name = B\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::preset(Preset::B));
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# toy run\nname = C   # trainable\nepochs = 12\nlearning_rate = 5e-4\n\nseed = 9\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.hyper.epochs, 12);
        assert_eq!(cfg.hyper.adam.learning_rate, 5e-4);
        assert_eq!(cfg.hyper.seed, 9);
        assert_eq!(cfg.alpha_mode, AlphaMode::Trainable { init: 0.01 });
    }

    #[test]
    fn published_switch_then_explicit_override() {
        let cfg = parse_config("name = A\npaper_hparams = true\n").unwrap();
        assert_eq!(cfg.hyper.epochs, 30);
        assert_eq!(cfg.hyper.adam.learning_rate, 1e-5);
        let cfg = parse_config("epochs = 3\nname = A\npaper_hparams = true\n").unwrap();
        assert_eq!(cfg.hyper.epochs, 3);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            parse_config("name = B\nepochs 300\n"),
            Err(ConfigError::Malformed {
                line: 2,
                text: "epochs 300".into()
            })
        );
        assert!(matches!(
            parse_config("name = B\n\nfoo = 1\n"),
            Err(ConfigError::UnknownKey { line: 3, .. })
        ));
        assert!(matches!(
            parse_config("name = B\nepochs = 2\nepochs = 3\n"),
            Err(ConfigError::Duplicate { line: 3, .. })
        ));
        assert!(matches!(
            parse_config("name = B\nepochs = many\n"),
            Err(ConfigError::BadValue { line: 2, .. })
        ));
        assert_eq!(parse_config("epochs = 3\n"), Err(ConfigError::MissingName));
        assert!(matches!(parse_config("name = E\n"), Err(ConfigError::UnknownPreset(_))));
    }

    #[test]
    fn preset_fields_are_immutable() {
        assert!(parse_config("name = B\nalpha_init = 0.01\nnoise_head_enabled = true\n").is_ok());
        assert!(matches!(
            parse_config("name = B\nnoise_head_enabled = false\n"),
            Err(ConfigError::PresetField { line: 2, .. })
        ));
        assert!(matches!(
            parse_config("name = A\nfusion_enabled = true\n"),
            Err(ConfigError::PresetField { .. })
        ));
        assert!(matches!(
            parse_config("name = C\nalpha_mode = fixed\n"),
            Err(ConfigError::PresetField { .. })
        ));
        assert!(matches!(
            parse_config("name = baseline\nnoise_fraction = 0.05\n"),
            Err(ConfigError::PresetField { .. })
        ));
    }

    #[test]
    fn render_round_trips() {
        for p in Preset::ALL {
            let mut cfg = ExperimentConfig::preset(p);
            cfg.hyper.epochs = 17;
            cfg.hyper.seed = 4;
            assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
        }
    }
}
