use serde::{Deserialize, Serialize};

use crate::attention::FeatureMapConfig;
use crate::error::{Error, Result};
use crate::plan::{Strategy, WindowPlan};

pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// Windowed softmax attention using the layer's plan row.
    Local,
    /// Taylor-feature linear attention.
    Linear,
    /// Full causal softmax attention.
    Full,
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "local" => Ok(LayerKind::Local),
            "linear" => Ok(LayerKind::Linear),
            "full" => Ok(LayerKind::Full),
            other => Err(Error::config(&["layer_pattern"], format!("unknown layer kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayerKind::Local => "local",
            LayerKind::Linear => "linear",
            LayerKind::Full => "full",
        })
    }
}

/// `[Linear, Local, Local]` repeated to `layers` layers.
pub fn hybrid_pattern(layers: usize) -> Vec<LayerKind> {
    (0..layers).map(|i| if i % 3 == 0 { LayerKind::Linear } else { LayerKind::Local }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub base_window: usize,
    pub strategy: Strategy,
    pub layer_pattern: Vec<LayerKind>,
    /// Width of the learned query/key projection feeding the linear-attention feature map.
    pub proj_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// All-local model with `D = heads·head_dim` and a `2D` feed-forward width.
    pub fn local(layers: usize, heads: usize, head_dim: usize, strategy: Strategy, base_window: usize) -> Self {
        let model_dim = heads * head_dim;
        ModelConfig {
            layers,
            heads,
            model_dim,
            head_dim,
            vocab: BYTE_VOCAB,
            base_window,
            strategy,
            layer_pattern: vec![LayerKind::Local; layers],
            proj_dim: 16,
            ffn_dim: 2 * model_dim,
            max_seq_len: 512,
            norm_eps: 1e-6,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// Linear/local hybrid in blocks of `[Linear, Local, Local]`.
    pub fn hybrid(layers: usize, heads: usize, head_dim: usize, strategy: Strategy, base_window: usize) -> Self {
        ModelConfig {
            layer_pattern: hybrid_pattern(layers),
            ..Self::local(layers, heads, head_dim, strategy, base_window)
        }
    }

    pub fn with_pattern(mut self, pattern: Vec<LayerKind>) -> Self {
        self.layer_pattern = pattern;
        self
    }

    pub fn feature_map(&self) -> FeatureMapConfig {
        FeatureMapConfig { proj_dim: self.proj_dim, normalizer: self.head_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim != self.heads * self.head_dim {
            return Err(Error::config(
                &["model_dim", "heads", "head_dim"],
                format!("model_dim {} != heads {} x head_dim {}", self.model_dim, self.heads, self.head_dim),
            ));
        }
        if self.layer_pattern.len() != self.layers {
            return Err(Error::config(
                &["layer_pattern", "layers"],
                format!("pattern has {} entries for {} layers", self.layer_pattern.len(), self.layers),
            ));
        }
        for (key, value) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
            ("vocab", self.vocab),
        ] {
            if value == 0 {
                return Err(Error::config(&[key], "must be positive"));
            }
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::config(&["head_dim"], "rotary encoding needs an even head_dim"));
        }
        if self.layer_pattern.contains(&LayerKind::Linear) && (self.proj_dim == 0 || !self.proj_dim.is_multiple_of(2)) {
            return Err(Error::config(&["proj_dim"], "rotary encoding needs an even, positive proj_dim"));
        }
        self.plan().map_err(|e| Error::config(&["strategy", "layers", "heads", "base_window"], e.to_string()))?;
        Ok(())
    }

    /// Window plan spanning every layer; rows of non-local layers are unused.
    pub fn plan(&self) -> Result<WindowPlan> {
        WindowPlan::build(self.strategy, self.layers, self.heads, self.base_window)
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layer_pattern.iter().filter(|&&k| k == kind).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hybrid_preset_on_twelve_layers() {
        let cfg = ModelConfig::hybrid(12, 8, 64, Strategy::Mswa, 128);
        assert_eq!(cfg.count(LayerKind::Linear), 4);
        assert_eq!(cfg.count(LayerKind::Local), 8);
        for block in cfg.layer_pattern.chunks(3) {
            assert_eq!(block, [LayerKind::Linear, LayerKind::Local, LayerKind::Local]);
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn dimension_conflict_names_keys() {
        let mut cfg = ModelConfig::local(4, 4, 8, Strategy::Uniform, 16);
        cfg.model_dim = 30;
        let text = cfg.validate().unwrap_err().to_string();
        assert!(text.contains("model_dim") && text.contains("head_dim"), "{text}");
    }

    #[test]
    fn plan_errors_surface_as_config_errors() {
        let cfg = ModelConfig::local(4, 6, 8, Strategy::Mswa, 16);
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
