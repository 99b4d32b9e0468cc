//! Token-at-a-time inference with per-head ring-buffer caches.
//!
//! A head with window `w` keeps the keys and values of its `w` most recent
//! predecessors. Each step the live token's key and value are held aside,
//! the head attends over the cached rows (oldest first) followed by the live
//! row, and only then is the live row written into the ring, evicting the
//! oldest entry once the ring is full. The attended set is therefore the live
//! token plus up to `w` predecessors, the same set the parallel kernel uses.

use std::time::Instant;

use crate::attention::kernels::window_start;
use crate::attention::{taylor2_features, LinearState};
use crate::error::{Error, Result};
use crate::model::{LayerKind, Model, ModelConfig, Slot};
use crate::numerics::{nn, no_grad, Tensor};

/// Fixed-capacity ring of key/value rows.
#[derive(Debug, Clone)]
pub struct RingCache {
    capacity: usize,
    dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    filled: usize,
    next_slot: usize,
}

impl RingCache {
    /// Storage grows on demand up to `capacity` rows.
    pub fn new(capacity: usize, dim: usize) -> Self {
        RingCache { capacity, dim, keys: Vec::new(), values: Vec::new(), filled: 0, next_slot: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn push(&mut self, key: &[f64], value: &[f64]) {
        debug_assert_eq!(key.len(), self.dim);
        if self.capacity == 0 {
            return;
        }
        let d = self.dim;
        if self.filled < self.capacity {
            self.keys.extend_from_slice(key);
            self.values.extend_from_slice(value);
            self.filled += 1;
        } else {
            let slot = self.next_slot;
            self.keys[slot * d..(slot + 1) * d].copy_from_slice(key);
            self.values[slot * d..(slot + 1) * d].copy_from_slice(value);
        }
        self.next_slot = (self.next_slot + 1) % self.capacity;
    }

    /// Slot indices from oldest to newest.
    fn logical_slots(&self) -> impl Iterator<Item = usize> + '_ {
        let start = if self.filled < self.capacity { 0 } else { self.next_slot };
        (0..self.filled).map(move |i| (start + i) % self.filled.max(1))
    }

    /// Stored `(key, value)` rows from oldest to newest.
    pub fn rows(&self) -> impl Iterator<Item = (&[f64], &[f64])> + '_ {
        let d = self.dim;
        self.logical_slots().map(move |s| (&self.keys[s * d..(s + 1) * d], &self.values[s * d..(s + 1) * d]))
    }

    /// Softmax attention of `query` over the stored rows plus the live row.
    fn attend(&self, query: &[f64], live_key: &[f64], live_value: &[f64], out: &mut [f64]) {
        let scale = 1.0 / (self.dim as f64).sqrt();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let rows: Vec<(&[f64], &[f64])> = self.rows().chain(std::iter::once((live_key, live_value))).collect();
        let mut scores: Vec<f64> = rows.iter().map(|(k, _)| dot(query, k) * scale).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        out.fill(0.0);
        for (p, (_, v)) in scores.iter().zip(&rows) {
            let weight = p / total;
            out.iter_mut().zip(*v).for_each(|(o, vc)| *o += weight * vc);
        }
    }
}

#[derive(Debug, Clone)]
pub enum LayerState {
    Attention(Vec<RingCache>),
    Linear(Vec<LinearState>),
}

/// Inference state of one decoding session.
#[derive(Debug, Clone)]
pub struct DecodeState {
    layers: Vec<LayerState>,
    position: usize,
    max_len: usize,
}

/// Ring capacity of every attention head; linear layers yield `None`.
/// Full-attention heads keep the whole sequence.
fn head_capacities(model: &Model) -> Vec<Option<Vec<usize>>> {
    let cfg = model.config();
    (0..cfg.layers)
        .map(|i| match cfg.layer_pattern[i] {
            LayerKind::Local => Some(model.plan().row(i).to_vec()),
            LayerKind::Full => Some(vec![cfg.max_seq_len; cfg.heads]),
            LayerKind::Linear => None,
        })
        .collect()
}

impl DecodeState {
    pub fn new(model: &Model) -> Self {
        let cfg = model.config();
        let layers = head_capacities(model)
            .into_iter()
            .map(|caps| match caps {
                Some(caps) => {
                    LayerState::Attention(caps.into_iter().map(|c| RingCache::new(c, cfg.head_dim)).collect())
                }
                None => LayerState::Linear(
                    (0..cfg.heads).map(|_| LinearState::new(cfg.feature_map().feature_len(), cfg.head_dim)).collect(),
                ),
            })
            .collect();
        DecodeState { layers, position: 0, max_len: cfg.max_seq_len }
    }

    /// Index of the next token to be fed.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn cache(&self, layer: usize, head: usize) -> Option<&RingCache> {
        match &self.layers[layer] {
            LayerState::Attention(heads) => heads.get(head),
            LayerState::Linear(_) => None,
        }
    }

    /// Key/value rows held across all attention heads.
    pub fn cached_rows(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerState::Attention(heads) => heads.iter().map(RingCache::filled).sum(),
                LayerState::Linear(_) => 0,
            })
            .sum()
    }

    /// Bytes the state would occupy at `bytes_per_scalar`: two rows (key and
    /// value) of `head_dim` scalars per cached position, plus `S` and `z` of
    /// every linear-attention head.
    pub fn cache_bytes(&self, head_dim: usize, bytes_per_scalar: usize) -> usize {
        let linear: usize = self
            .layers
            .iter()
            .map(|l| match l {
                LayerState::Linear(heads) => heads.iter().map(LinearState::scalars).sum(),
                LayerState::Attention(_) => 0,
            })
            .sum();
        2 * bytes_per_scalar * head_dim * self.cached_rows() + bytes_per_scalar * linear
    }
}

/// Cache size after the token at `position` has been absorbed, computed from
/// the configuration alone.
pub fn plan_cache_bytes(config: &ModelConfig, position: usize, bytes_per_scalar: usize) -> Result<usize> {
    let plan = config.plan()?;
    let d = config.head_dim;
    let feature_len = config.feature_map().feature_len();
    let mut total = 0;
    for (i, kind) in config.layer_pattern.iter().enumerate() {
        total += match kind {
            LayerKind::Local => plan.row(i).iter().map(|&w| 2 * bytes_per_scalar * d * (position + 1).min(w)).sum(),
            LayerKind::Full => config.heads * 2 * bytes_per_scalar * d * (position + 1).min(config.max_seq_len),
            LayerKind::Linear => config.heads * bytes_per_scalar * (feature_len * d + feature_len),
        };
    }
    Ok(total)
}

fn row_of(t: &Tensor) -> &[f64] {
    t.data()
}

/// Feeds one token, returning next-token logits `[vocab]`.
pub fn step(model: &Model, state: &mut DecodeState, token: usize) -> Result<Tensor> {
    let cfg = model.config();
    if state.position >= state.max_len {
        return Err(Error::Length { len: state.position + 1, max: state.max_len });
    }
    if token >= cfg.vocab {
        return Err(Error::Vocabulary { token, vocab: cfg.vocab });
    }
    let pos = [state.position];
    let (heads, d) = (cfg.heads, cfg.head_dim);
    let logits = no_grad(|| -> Result<Tensor> {
        let mut x = nn::embedding(model.embed(), &[token])?;
        for (layer, layer_state) in state.layers.iter_mut().enumerate() {
            let h = nn::rms_norm(&x, model.layer_param(layer, Slot::AttnNorm), cfg.norm_eps)?;
            let q = nn::rope(&h.matmul(model.layer_param(layer, Slot::Wq))?, heads, &pos)?;
            let k = nn::rope(&h.matmul(model.layer_param(layer, Slot::Wk))?, heads, &pos)?;
            let v = h.matmul(model.layer_param(layer, Slot::Wv))?;
            let mut attended = vec![0.0; heads * d];
            match layer_state {
                LayerState::Attention(caches) => {
                    let (q, k, v) = (row_of(&q), row_of(&k), row_of(&v));
                    for (hd, cache) in caches.iter_mut().enumerate() {
                        let r = hd * d..(hd + 1) * d;
                        cache.attend(&q[r.clone()], &k[r.clone()], &v[r.clone()], &mut attended[r.clone()]);
                        cache.push(&k[r.clone()], &v[r]);
                    }
                }
                LayerState::Linear(states) => {
                    let fmap = cfg.feature_map();
                    let fq = taylor2_features(&q, heads, fmap)?;
                    let fk = taylor2_features(&k, heads, fmap)?;
                    let fl = fmap.feature_len();
                    for (hd, ls) in states.iter_mut().enumerate() {
                        ls.absorb(&fk.data()[hd * fl..(hd + 1) * fl], &v.data()[hd * d..(hd + 1) * d]);
                        let den = ls.read(&fq.data()[hd * fl..(hd + 1) * fl], &mut attended[hd * d..(hd + 1) * d]);
                        if den.is_nan() || den <= 0.0 {
                            return Err(Error::NumericalDegeneracy { position: pos[0], value: den });
                        }
                    }
                }
            }
            let a = Tensor::new(attended, &[1, heads * d])?.matmul(model.layer_param(layer, Slot::Wo))?;
            x = x.add(&a)?;
            x = x.add(&model.feed_forward(&x, layer)?)?;
        }
        let h = nn::rms_norm(&x, model.final_norm(), cfg.norm_eps)?;
        h.matmul(model.lm_head())?.reshape(&[cfg.vocab])
    })?;
    state.position += 1;
    Ok(logits)
}

/// Runs the parallel forward pass over `tokens`, then back-fills every cache
/// from the last positions of each head's window. Returns the logits of all
/// positions and the state ready for the next token.
pub fn prefill(model: &Model, tokens: &[usize]) -> Result<(Tensor, DecodeState)> {
    let out = no_grad(|| model.forward_packed(tokens, 1, crate::attention::Execution::Grouped))?;
    let cfg = model.config();
    let mut state = DecodeState::new(model);
    let n = tokens.len();
    for (layer_state, trace) in state.layers.iter_mut().zip(&out.traces) {
        match layer_state {
            LayerState::Attention(caches) => {
                let d = cfg.head_dim;
                let width = cfg.heads * d;
                for (hd, cache) in caches.iter_mut().enumerate() {
                    for i in window_start(n, cache.capacity())..n {
                        let r = i * width + hd * d..i * width + (hd + 1) * d;
                        cache.push(&trace.keys.data()[r.clone()], &trace.values.data()[r]);
                    }
                }
            }
            LayerState::Linear(states) => {
                let (fl, d) = (cfg.feature_map().feature_len(), cfg.head_dim);
                for (hd, ls) in states.iter_mut().enumerate() {
                    for i in 0..n {
                        let fk = &trace.keys.data()[(i * cfg.heads + hd) * fl..(i * cfg.heads + hd + 1) * fl];
                        let v = &trace.values.data()[(i * cfg.heads + hd) * d..(i * cfg.heads + hd + 1) * d];
                        ls.absorb(fk, v);
                    }
                }
            }
        }
    }
    state.position = n;
    Ok((out.logits, state))
}

pub fn argmax(values: &[f64]) -> usize {
    values.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

/// Greedy continuation of `prompt` by `steps` tokens, fed one token at a time.
/// Returns the generated tokens and the logits that produced each.
pub fn greedy_decode(model: &Model, prompt: &[usize], steps: usize) -> Result<(Vec<usize>, Vec<Tensor>)> {
    let first = *prompt.first().ok_or(Error::EmptySequence)?;
    let mut state = DecodeState::new(model);
    let mut logits = step(model, &mut state, first)?;
    for &t in &prompt[1..] {
        logits = step(model, &mut state, t)?;
    }
    let mut generated = Vec::with_capacity(steps);
    let mut history = Vec::with_capacity(steps);
    for i in 0..steps {
        let next = argmax(logits.data());
        generated.push(next);
        history.push(logits);
        if i + 1 < steps {
            logits = step(model, &mut state, next)?;
        } else {
            break;
        }
    }
    Ok((generated, history))
}

/// One row of a decode timing sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub position: usize,
    pub step_micros: f64,
    pub cache_bytes: usize,
}

/// Times every single-token step while feeding `tokens` from an empty state.
pub fn bench_decode(model: &Model, tokens: &[usize], bytes_per_scalar: usize) -> Result<Vec<BenchRow>> {
    let mut state = DecodeState::new(model);
    let d = model.config().head_dim;
    tokens
        .iter()
        .map(|&t| {
            let position = state.position();
            let start = Instant::now();
            step(model, &mut state, t)?;
            let step_micros = start.elapsed().as_secs_f64() * 1e6;
            Ok(BenchRow { position, step_micros, cache_bytes: state.cache_bytes(d, bytes_per_scalar) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ring_keeps_latest_rows_in_order() {
        let mut ring = RingCache::new(3, 1);
        for i in 0..7 {
            ring.push(&[i as f64], &[-(i as f64)]);
            assert_eq!(ring.filled(), (i + 1).min(3));
        }
        let keys: Vec<f64> = ring.rows().map(|(k, _)| k[0]).collect();
        assert_eq!(keys, vec![4.0, 5.0, 6.0]);
    }

    proptest! {
        #[test]
        fn ring_equals_sliding_window_of_stream(capacity in 1usize..9, stream in proptest::collection::vec(-100i32..100, 0..40)) {
            let mut ring = RingCache::new(capacity, 1);
            for (t, &x) in stream.iter().enumerate() {
                ring.push(&[x as f64], &[x as f64 * 2.0]);
                let lo = (t + 1).saturating_sub(capacity);
                let want: Vec<f64> = stream[lo..=t].iter().map(|&x| x as f64).collect();
                let got: Vec<f64> = ring.rows().map(|(k, _)| k[0]).collect();
                prop_assert_eq!(got, want);
                prop_assert!(ring.filled() <= capacity);
            }
        }
    }
}
