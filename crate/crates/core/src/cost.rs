//! Exact operation and memory counts for a model configuration.
//!
//! Softmax attention over an attended (query, key) pair costs one `d`-length
//! dot product for the score and one `d`-length multiply-add into the output,
//! 2·2·d flops in total; the exponential is counted separately. A linear
//! attention head absorbs one key (`S += φ(k)ᵀv`, `z += φ(k)`) and reads one
//! query per token, 2·(2·F·d + 2·F) flops with `F` the feature length.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelConfig};
use crate::plan::{Rational, Strategy};

/// `Σ_{i<n} (min(i, w) + 1)`, the number of pairs scored by one head of
/// window `w` over `n` positions.
pub fn attended_pairs(n: u64, w: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let w = w.min(n - 1);
    // ramp over i = 0..=w, then a flat band of width w + 1
    (w + 1) * (w + 2) / 2 + (n - w - 1) * (w + 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: LayerKind,
    /// Per-head windows; empty for linear layers.
    pub windows: Vec<usize>,
    pub pairs: u64,
    pub score_flops: u64,
    pub softmax_exps: u64,
    pub linear_flops: u64,
    /// Key/value rows cached after the last position.
    pub cache_rows: u64,
    /// Scalars of linear-attention state.
    pub state_scalars: u64,
    /// Σ of the layer's windows: `w` per local head, `n − 1` per full head.
    pub window_budget: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub seq_len: usize,
    pub head_dim: usize,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    fn total(&self, f: impl Fn(&LayerCost) -> u64) -> u64 {
        self.layers.iter().map(f).sum()
    }

    pub fn attended_pairs(&self) -> u64 {
        self.total(|l| l.pairs)
    }

    pub fn attention_flops(&self) -> u64 {
        self.total(|l| l.score_flops + l.linear_flops)
    }

    pub fn softmax_exps(&self) -> u64 {
        self.total(|l| l.softmax_exps)
    }

    pub fn cache_rows(&self) -> u64 {
        self.total(|l| l.cache_rows)
    }

    pub fn window_budget(&self) -> u64 {
        self.total(|l| l.window_budget)
    }

    /// Inference state after the last position: two `d`-vectors per cached
    /// row plus all linear-attention accumulators.
    pub fn cache_bytes(&self, bytes_per_scalar: u64) -> u64 {
        bytes_per_scalar * (2 * self.head_dim as u64 * self.cache_rows() + self.total(|l| l.state_scalars))
    }

    /// Window budget of this configuration over that of `reference`.
    pub fn relative_cost(&self, reference: &CostReport) -> Result<Rational> {
        let denominator = reference.window_budget();
        if denominator == 0 {
            return Err(Error::config(&["reference"], "reference configuration has no softmax attention"));
        }
        Ok(Rational::new(self.window_budget(), denominator))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:>5} {:>6} {:>14} {:>16} {:>14} {:>12} {:>12}\n",
            "layer", "kind", "pairs", "flops", "exps", "cache_rows", "budget"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:>5} {:>6} {:>14} {:>16} {:>14} {:>12} {:>12}",
                l.layer,
                l.kind.to_string(),
                l.pairs,
                l.score_flops + l.linear_flops,
                l.softmax_exps,
                l.cache_rows,
                l.window_budget
            );
        }
        let _ = writeln!(
            out,
            "{:>5} {:>6} {:>14} {:>16} {:>14} {:>12} {:>12}",
            "all",
            "",
            self.attended_pairs(),
            self.attention_flops(),
            self.softmax_exps(),
            self.cache_rows(),
            self.window_budget()
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer,kind,pairs,score_flops,linear_flops,softmax_exps,cache_rows,state_scalars,window_budget\n",
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                l.layer,
                l.kind,
                l.pairs,
                l.score_flops,
                l.linear_flops,
                l.softmax_exps,
                l.cache_rows,
                l.state_scalars,
                l.window_budget
            );
        }
        out
    }
}

/// Counts for one forward pass of `n` positions through every layer.
pub fn report(config: &ModelConfig, n: usize) -> Result<CostReport> {
    config.validate()?;
    let plan = config.plan()?;
    let (d, h) = (config.head_dim as u64, config.heads as u64);
    let span = n.saturating_sub(1);
    let feature_len = config.feature_map().feature_len() as u64;
    let layers = config
        .layer_pattern
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let windows: Vec<usize> = match kind {
                LayerKind::Local => plan.row(i).to_vec(),
                LayerKind::Full => vec![span; config.heads],
                LayerKind::Linear => Vec::new(),
            };
            let pairs: u64 = windows.iter().map(|&w| attended_pairs(n as u64, w as u64)).sum();
            let cache_rows = windows.iter().map(|&w| (n as u64).min(w as u64)).sum();
            let (linear_flops, state_scalars) = if kind == LayerKind::Linear {
                (h * 2 * (2 * feature_len * d + 2 * feature_len) * n as u64, h * (feature_len * d + feature_len))
            } else {
                (0, 0)
            };
            LayerCost {
                layer: i,
                kind,
                pairs,
                score_flops: 4 * d * pairs,
                softmax_exps: pairs,
                linear_flops,
                cache_rows,
                state_scalars,
                window_budget: windows.iter().map(|&w| w as u64).sum(),
                windows,
            }
        })
        .collect();
    Ok(CostReport { seq_len: n, head_dim: config.head_dim, layers })
}

/// One row of the base-window ablation: SWA and multi-scale plans at four
/// base windows, priced against the multi-scale plan at `w = 128`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub base_window: usize,
    pub min_window: usize,
    pub max_window: usize,
    pub relative_cost: Rational,
}

pub const ABLATION_REFERENCE_WINDOW: usize = 128;

pub fn base_window_ablation(layers: usize, heads: usize, head_dim: usize) -> Result<Vec<AblationRow>> {
    let price = |strategy: Strategy, w: usize| -> Result<(CostReport, usize, usize)> {
        let cfg = ModelConfig::local(layers, heads, head_dim, strategy, w);
        let plan = cfg.plan()?;
        let all: Vec<usize> = plan.rows().flatten().copied().collect();
        let (lo, hi) = (all.iter().copied().min().unwrap_or(0), all.iter().copied().max().unwrap_or(0));
        Ok((report(&cfg, 1)?, lo, hi))
    };
    let (reference, _, _) = price(Strategy::Mswa, ABLATION_REFERENCE_WINDOW)?;
    let mut rows = Vec::new();
    for w in [512, 256, 128, 64] {
        for strategy in [Strategy::Uniform, Strategy::Mswa] {
            let (r, min_window, max_window) = price(strategy, w)?;
            rows.push(AblationRow {
                strategy,
                base_window: w,
                min_window,
                max_window,
                relative_cost: r.relative_cost(&reference)?,
            });
        }
    }
    Ok(rows)
}

pub fn ratio_to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}
