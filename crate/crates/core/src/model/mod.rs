//! Decoder-only byte-level language model built from local (windowed),
//! linear and full attention layers.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod train;

use crate::attention::{self, mswa_layer_batched, AttentionParams, Execution, LayerTrace, FULL_WINDOW};
use crate::error::{Error, Result};
use crate::numerics::{nn, Parameter, Tensor};
use crate::plan::WindowPlan;
use crate::rng;

pub use config::{hybrid_pattern, LayerKind, ModelConfig, BYTE_VOCAB};

/// Per-layer parameter slots, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    AttnNorm,
    Wq,
    Wk,
    Wv,
    Wo,
    FfnNorm,
    Gate,
    Up,
    Down,
}

impl Slot {
    const ALL: [Slot; 9] =
        [Slot::AttnNorm, Slot::Wq, Slot::Wk, Slot::Wv, Slot::Wo, Slot::FfnNorm, Slot::Gate, Slot::Up, Slot::Down];

    fn name(self) -> &'static str {
        match self {
            Slot::AttnNorm => "attn_norm",
            Slot::Wq => "attn.wq",
            Slot::Wk => "attn.wk",
            Slot::Wv => "attn.wv",
            Slot::Wo => "attn.wo",
            Slot::FfnNorm => "ffn_norm",
            Slot::Gate => "ffn.gate",
            Slot::Up => "ffn.up",
            Slot::Down => "ffn.down",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    plan: WindowPlan,
    params: Vec<Parameter>,
}

/// Shapes of every parameter, in storage order.
fn parameter_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (dm, inner, r) = (cfg.model_dim, cfg.heads * cfg.head_dim, cfg.heads * cfg.proj_dim);
    let mut specs = vec![("embed".to_string(), vec![cfg.vocab, dm])];
    for (i, kind) in cfg.layer_pattern.iter().enumerate() {
        let qk = if *kind == LayerKind::Linear { r } else { inner };
        for slot in Slot::ALL {
            let shape = match slot {
                Slot::AttnNorm | Slot::FfnNorm => vec![dm],
                Slot::Wq | Slot::Wk => vec![dm, qk],
                Slot::Wv => vec![dm, inner],
                Slot::Wo => vec![inner, dm],
                Slot::Gate | Slot::Up => vec![dm, cfg.ffn_dim],
                Slot::Down => vec![cfg.ffn_dim, dm],
            };
            specs.push((format!("layers.{i}.{}", slot.name()), shape));
        }
    }
    specs.push(("final_norm".to_string(), vec![dm]));
    specs.push(("lm_head".to_string(), vec![dm, cfg.vocab]));
    specs
}

/// Output of a forward pass: logits `[rows × vocab]` and, when requested,
/// the keys and values every layer attended over.
pub struct ForwardOutput {
    pub logits: Tensor,
    pub traces: Vec<LayerTrace>,
}

impl Model {
    /// Fresh model: matrices drawn from a truncated normal with `init_std`,
    /// norm gains set to one. Each parameter draws from the stream named by
    /// its path, so initialization is independent of parameter order.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let plan = config.plan()?;
        let params = parameter_specs(&config)
            .into_iter()
            .map(|(name, shape)| {
                let numel = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![1.0; numel]
                } else {
                    rng::truncated_normal(&mut rng::stream(config.seed, &name), numel, config.init_std)
                };
                Ok(Parameter::new(name, Tensor::new(data, &shape)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { config, plan, params })
    }

    /// Rebuilds a model from named parameter data, as stored in a checkpoint.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut model = Model::new(config)?;
        if named.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, data) in named {
            model.set_param(&name, data)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &WindowPlan {
        &self.plan
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn set_param(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        p.tensor = Tensor::param(data, p.tensor.shape())?;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    pub(crate) fn embed(&self) -> &Tensor {
        &self.params[0].tensor
    }

    pub(crate) fn layer_param(&self, layer: usize, slot: Slot) -> &Tensor {
        let index = Slot::ALL.iter().position(|&s| s == slot).unwrap_or(0);
        &self.params[1 + layer * Slot::ALL.len() + index].tensor
    }

    pub(crate) fn final_norm(&self) -> &Tensor {
        &self.params[self.params.len() - 2].tensor
    }

    pub(crate) fn lm_head(&self) -> &Tensor {
        &self.params[self.params.len() - 1].tensor
    }

    pub(crate) fn attention_params(&self, layer: usize) -> AttentionParams {
        AttentionParams {
            wq: self.layer_param(layer, Slot::Wq).clone(),
            wk: self.layer_param(layer, Slot::Wk).clone(),
            wv: self.layer_param(layer, Slot::Wv).clone(),
            wo: self.layer_param(layer, Slot::Wo).clone(),
            heads: self.config.heads,
            head_dim: self.config.head_dim,
        }
    }

    /// Windows a layer's heads use: its plan row for local layers, the whole
    /// prefix for full layers, nothing for linear layers.
    pub fn layer_windows(&self, layer: usize) -> Option<Vec<usize>> {
        match self.config.layer_pattern[layer] {
            LayerKind::Local => Some(self.plan.row(layer).to_vec()),
            LayerKind::Full => Some(vec![FULL_WINDOW; self.config.heads]),
            LayerKind::Linear => None,
        }
    }

    fn linear_layer(
        &self,
        h: &Tensor,
        layer: usize,
        batch: usize,
        positions: &[usize],
    ) -> Result<(Tensor, LayerTrace)> {
        let heads = self.config.heads;
        let fmap = self.config.feature_map();
        let q = nn::rope(&h.matmul(self.layer_param(layer, Slot::Wq))?, heads, positions)?;
        let k = nn::rope(&h.matmul(self.layer_param(layer, Slot::Wk))?, heads, positions)?;
        let fq = attention::taylor2_features(&q, heads, fmap)?;
        let fk = attention::taylor2_features(&k, heads, fmap)?;
        let v = h.matmul(self.layer_param(layer, Slot::Wv))?;
        let seq = positions.len() / batch;
        let out = attention::multi_head_linear_attention(&fq, &fk, &v, batch, seq, heads)?
            .matmul(self.layer_param(layer, Slot::Wo))?;
        Ok((out, LayerTrace { keys: fk, values: v }))
    }

    pub(crate) fn feed_forward(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        let h = nn::rms_norm(x, self.layer_param(layer, Slot::FfnNorm), self.config.norm_eps)?;
        let gate = h.matmul(self.layer_param(layer, Slot::Gate))?;
        let up = h.matmul(self.layer_param(layer, Slot::Up))?;
        nn::swiglu(&gate, &up)?.matmul(self.layer_param(layer, Slot::Down))
    }

    /// Forward pass over `batch` equal-length sequences packed in `tokens`.
    pub fn forward_packed(&self, tokens: &[usize], batch: usize, execution: Execution) -> Result<ForwardOutput> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::Data(format!("{} tokens do not split into {batch} sequences", tokens.len())));
        }
        let seq = tokens.len() / batch;
        if seq > self.config.max_seq_len {
            return Err(Error::Length { len: seq, max: self.config.max_seq_len });
        }
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let mut x = nn::embedding(self.embed(), tokens)?;
        let mut traces = Vec::with_capacity(self.config.layers);
        for layer in 0..self.config.layers {
            let h = nn::rms_norm(&x, self.layer_param(layer, Slot::AttnNorm), self.config.norm_eps)?;
            let (a, trace) = match self.layer_windows(layer) {
                Some(row) => mswa_layer_batched(&h, &self.attention_params(layer), &row, batch, &positions, execution)?,
                None => self.linear_layer(&h, layer, batch, &positions)?,
            };
            traces.push(trace);
            x = x.add(&a)?;
            x = x.add(&self.feed_forward(&x, layer)?)?;
        }
        let h = nn::rms_norm(&x, self.final_norm(), self.config.norm_eps)?;
        Ok(ForwardOutput { logits: h.matmul(self.lm_head())?, traces })
    }

    /// Logits `[n × vocab]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.forward_packed(tokens, 1, Execution::Grouped)?.logits)
    }

    /// Mean next-token cross-entropy (nats) over packed sequences.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize) -> Result<Tensor> {
        let logits = self.forward_packed(inputs, batch, Execution::Grouped)?.logits;
        nn::cross_entropy(&logits, targets)
    }
}
