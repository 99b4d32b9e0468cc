//! Run configuration: a flat TOML file of keys, overridden by command-line
//! flags of the same names, over built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mswa::model::corpus::SplitOffsets;
use mswa::model::train::TrainConfig;
use mswa::model::{hybrid_pattern, LayerKind, ModelConfig, BYTE_VOCAB};
use mswa::plan::Strategy;
use serde::{Deserialize, Serialize};

macro_rules! keys {
    ($($(#[$meta:meta])* $field:ident: $ty:ty;)*) => {
        /// Every configurable key. Unset keys fall through to the next layer.
        #[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct Keys {
            $($(#[$meta])* #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")] pub $field: Option<$ty>,)*
            /// Set from the global `--seed` flag.
            #[arg(skip)]
            #[serde(skip_serializing_if = "Option::is_none")]
            pub seed: Option<u64>,
        }

        impl Keys {
            /// Keys set here win; the rest come from `lower`.
            pub fn over(self, lower: Keys) -> Keys {
                Keys { $($field: self.$field.or(lower.$field),)* seed: self.seed.or(lower.seed) }
            }
        }
    };
}

keys! {
    layers: usize;
    heads: usize;
    head_dim: usize;
    /// Defaults to heads × head_dim.
    model_dim: usize;
    base_window: usize;
    strategy: Strategy;
    /// `local`, `full`, `hybrid`, or a comma-separated list of layer kinds.
    layer_pattern: String;
    proj_dim: usize;
    ffn_dim: usize;
    max_seq_len: usize;
    norm_eps: f64;
    init_std: f64;
    steps: usize;
    batch_size: usize;
    seq_len: usize;
    lr: f64;
    warmup_steps: usize;
    beta1: f64;
    beta2: f64;
    weight_decay: f64;
    min_lr_ratio: f64;
    grad_clip: f64;
    checkpoint_every: usize;
    corpus: PathBuf;
    checkpoint: PathBuf;
    valid_offset: usize;
    test_offset: usize;
}

pub fn read_file(path: &Path) -> Result<Keys> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{}: cannot read config", path.display()))?;
    toml::from_str(&text).with_context(|| format!("{}: invalid config", path.display()))
}

/// Fully resolved run settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub splits: SplitOffsets,
}

fn parse_pattern(text: &str, layers: usize) -> Result<Vec<LayerKind>> {
    Ok(match text.trim() {
        "local" => vec![LayerKind::Local; layers],
        "full" => vec![LayerKind::Full; layers],
        "linear" => vec![LayerKind::Linear; layers],
        "hybrid" => hybrid_pattern(layers),
        list => list.split(',').map(|k| k.parse::<LayerKind>()).collect::<mswa::Result<_>>()?,
    })
}

fn pattern_text(pattern: &[LayerKind]) -> String {
    pattern.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn resolve(keys: &Keys) -> Result<Self> {
        let t = TrainConfig::default();
        let layers = keys.layers.unwrap_or(4);
        let heads = keys.heads.unwrap_or(4);
        let head_dim = keys.head_dim.unwrap_or(32);
        let model_dim = keys.model_dim.unwrap_or(heads * head_dim);
        let seed = keys.seed.unwrap_or(0);
        let model = ModelConfig {
            layers,
            heads,
            model_dim,
            head_dim,
            vocab: BYTE_VOCAB,
            base_window: keys.base_window.unwrap_or(32),
            strategy: keys.strategy.unwrap_or(Strategy::Mswa),
            layer_pattern: parse_pattern(keys.layer_pattern.as_deref().unwrap_or("local"), layers)?,
            proj_dim: keys.proj_dim.unwrap_or(16),
            ffn_dim: keys.ffn_dim.unwrap_or(2 * model_dim),
            max_seq_len: keys.max_seq_len.unwrap_or(512),
            norm_eps: keys.norm_eps.unwrap_or(1e-6),
            init_std: keys.init_std.unwrap_or(0.02),
            seed,
        };
        let train = TrainConfig {
            steps: keys.steps.unwrap_or(t.steps),
            batch_size: keys.batch_size.unwrap_or(t.batch_size),
            seq_len: keys.seq_len.unwrap_or(t.seq_len),
            lr: keys.lr.unwrap_or(t.lr),
            warmup_steps: keys.warmup_steps.unwrap_or(t.warmup_steps),
            beta1: keys.beta1.unwrap_or(t.beta1),
            beta2: keys.beta2.unwrap_or(t.beta2),
            weight_decay: keys.weight_decay.unwrap_or(t.weight_decay),
            min_lr_ratio: keys.min_lr_ratio.unwrap_or(t.min_lr_ratio),
            grad_clip: keys.grad_clip.unwrap_or(t.grad_clip),
            seed,
            checkpoint_every: keys.checkpoint_every.unwrap_or(t.checkpoint_every),
        };
        if train.seq_len > model.max_seq_len {
            bail!(mswa::Error::Config {
                keys: vec!["seq_len".into(), "max_seq_len".into()],
                message: format!("seq_len {} exceeds max_seq_len {}", train.seq_len, model.max_seq_len),
            });
        }
        model.validate()?;
        train.validate()?;
        Ok(RunConfig {
            model,
            train,
            corpus: keys.corpus.clone(),
            checkpoint: keys.checkpoint.clone(),
            splits: SplitOffsets { valid_offset: keys.valid_offset, test_offset: keys.test_offset },
        })
    }

    /// Every key with its resolved value, suitable for reloading with `--config`.
    pub fn to_keys(&self) -> Keys {
        let (m, t) = (&self.model, &self.train);
        Keys {
            layers: Some(m.layers),
            heads: Some(m.heads),
            head_dim: Some(m.head_dim),
            model_dim: Some(m.model_dim),
            base_window: Some(m.base_window),
            strategy: Some(m.strategy),
            layer_pattern: Some(pattern_text(&m.layer_pattern)),
            proj_dim: Some(m.proj_dim),
            ffn_dim: Some(m.ffn_dim),
            max_seq_len: Some(m.max_seq_len),
            norm_eps: Some(m.norm_eps),
            init_std: Some(m.init_std),
            steps: Some(t.steps),
            batch_size: Some(t.batch_size),
            seq_len: Some(t.seq_len),
            lr: Some(t.lr),
            warmup_steps: Some(t.warmup_steps),
            beta1: Some(t.beta1),
            beta2: Some(t.beta2),
            weight_decay: Some(t.weight_decay),
            min_lr_ratio: Some(t.min_lr_ratio),
            grad_clip: Some(t.grad_clip),
            checkpoint_every: Some(t.checkpoint_every),
            corpus: self.corpus.clone(),
            checkpoint: self.checkpoint.clone(),
            valid_offset: self.splits.valid_offset,
            test_offset: self.splits.test_offset,
            seed: Some(m.seed),
        }
    }

    /// Writes `resolved_config.toml` into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("{}: cannot create output directory", dir.display()))?;
        let path = dir.join("resolved_config.toml");
        let text = toml::to_string(&self.to_keys()).context("serializing resolved config")?;
        std::fs::write(&path, text).with_context(|| format!("{}: cannot write", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_beats_file_beats_defaults() {
        let file: Keys = toml::from_str("layers = 8\nheads = 8\nlr = 0.01\n").unwrap();
        let cli = Keys { heads: Some(4), ..Keys::default() };
        let run = RunConfig::resolve(&cli.over(file)).unwrap();
        assert_eq!((run.model.layers, run.model.heads), (8, 4));
        assert_eq!(run.train.lr, 0.01);
        assert_eq!(run.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn resolved_config_round_trips() {
        let keys = Keys { layer_pattern: Some("hybrid".into()), layers: Some(12), seed: Some(9), ..Keys::default() };
        let run = RunConfig::resolve(&keys).unwrap();
        let text = toml::to_string(&run.to_keys()).unwrap();
        let again = RunConfig::resolve(&toml::from_str(&text).unwrap()).unwrap();
        assert_eq!(again.model, run.model);
        assert_eq!(again.train, run.train);
    }

    #[test]
    fn unknown_keys_and_conflicts_are_reported() {
        assert!(toml::from_str::<Keys>("layerz = 3").is_err());
        let keys = Keys { model_dim: Some(100), ..Keys::default() };
        let msg = RunConfig::resolve(&keys).unwrap_err().to_string();
        assert!(msg.contains("model_dim"), "{msg}");
    }
}
