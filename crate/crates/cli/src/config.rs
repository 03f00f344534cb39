//! `key = value` run configuration layered over a preset.

use std::path::Path;
use std::str::FromStr;

use headline_core::pipeline::PipelineConfig;
use headline_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-scale settings (512-wide, 40k vocabulary).
    Full,
    /// Laptop-sized settings (64-wide, 500-token vocabulary).
    Micro,
}

impl Preset {
    pub fn config(self) -> PipelineConfig {
        match self {
            Preset::Full => PipelineConfig::full_scale(),
            Preset::Micro => PipelineConfig::micro(),
        }
    }
}

/// Every key a config file or `--set` may name.
pub const KEYS: &[&str] = &[
    "seed",
    "model",
    "d_model",
    "n_heads",
    "n_steps",
    "dropout",
    "tie_output",
    "untied_depth",
    "pretrained_embeddings",
    "bpe_vocab",
    "test_size",
    "val_fraction",
    "min_title_words",
    "max_title_words",
    "min_body_words",
    "max_body_words",
    "skip_obituaries",
    "obituary_keywords",
    "sgns_window",
    "sgns_negatives",
    "sgns_epochs",
    "sgns_learning_rate",
    "warmup_steps",
    "lr_scale",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "label_smoothing",
    "batch_tokens",
    "max_src_tokens",
    "max_title_tokens",
    "patience",
    "eval_every",
    "max_steps",
    "clip_norm",
    "beam",
    "max_len",
    "length_normalize",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Sets one key. Unknown keys are rejected.
pub fn apply(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<()> {
    let v = value;
    match key {
        "seed" => cfg.seed = parse(key, v)?,
        "model" => cfg.model.kind = v.parse()?,
        "d_model" => cfg.model.d_model = parse(key, v)?,
        "n_heads" => cfg.model.n_heads = parse(key, v)?,
        "n_steps" => cfg.model.n_steps = parse(key, v)?,
        "dropout" => cfg.model.dropout = parse(key, v)?,
        "tie_output" => cfg.model.tie_output = parse(key, v)?,
        "untied_depth" => cfg.model.untied_depth = parse(key, v)?,
        "pretrained_embeddings" => cfg.model.pretrained_embeddings = parse(key, v)?,
        "bpe_vocab" => cfg.bpe_vocab = parse(key, v)?,
        "test_size" => cfg.test_size = parse(key, v)?,
        "val_fraction" => cfg.val_fraction = parse(key, v)?,
        "min_title_words" => cfg.filter.min_title_words = parse(key, v)?,
        "max_title_words" => cfg.filter.max_title_words = parse(key, v)?,
        "min_body_words" => cfg.filter.min_body_words = parse(key, v)?,
        "max_body_words" => cfg.filter.max_body_words = parse(key, v)?,
        "skip_obituaries" => cfg.filter.skip_obituaries = parse(key, v)?,
        "obituary_keywords" => {
            cfg.filter.obituary_keywords = v.split(',').map(|k| k.trim().to_lowercase()).filter(|k| !k.is_empty()).collect()
        }
        "sgns_window" => cfg.sgns.window = parse(key, v)?,
        "sgns_negatives" => cfg.sgns.negatives = parse(key, v)?,
        "sgns_epochs" => cfg.sgns.epochs = parse(key, v)?,
        "sgns_learning_rate" => cfg.sgns.learning_rate = parse(key, v)?,
        "warmup_steps" => cfg.train.warmup_steps = parse(key, v)?,
        "lr_scale" => cfg.train.lr_scale = parse(key, v)?,
        "adam_beta1" => cfg.train.adam_betas.0 = parse(key, v)?,
        "adam_beta2" => cfg.train.adam_betas.1 = parse(key, v)?,
        "adam_eps" => cfg.train.adam_eps = parse(key, v)?,
        "label_smoothing" => cfg.train.label_smoothing = parse(key, v)?,
        "batch_tokens" => cfg.train.batch_tokens = parse(key, v)?,
        "max_src_tokens" => cfg.train.max_src_tokens = parse(key, v)?,
        "max_title_tokens" => cfg.train.max_title_tokens = parse(key, v)?,
        "patience" => cfg.train.patience = parse(key, v)?,
        "eval_every" => cfg.train.eval_every = parse(key, v)?,
        "max_steps" => cfg.train.max_steps = parse(key, v)?,
        "clip_norm" => {
            cfg.train.clip_norm = match v {
                "none" | "off" => None,
                _ => Some(parse(key, v)?),
            }
        }
        "beam" => cfg.beam = parse(key, v)?,
        "max_len" => cfg.max_len = parse(key, v)?,
        "length_normalize" => cfg.length_normalize = parse(key, v)?,
        _ => {
            return Err(Error::Config(format!(
                "unknown configuration key `{key}` (known keys: {})",
                KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

/// `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Preset, then the config file, then `--set key=value` overrides.
pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut cfg = preset.config();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        for (k, v) in parse_lines(&text, &path.display().to_string())? {
            apply(&mut cfg, &k, &v)?;
        }
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
        apply(&mut cfg, k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}
