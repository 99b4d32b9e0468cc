use super::{multi_head_attention, Execution, HeadLayout};
use crate::error::{Error, Result};
use crate::numerics::{nn, Tensor};

/// Projection weights of one attention layer in the fused layout: `wq`, `wk`,
/// `wv` are `D × h·d`, `wo` is `h·d × D`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn model_dim(&self) -> usize {
        self.wq.shape()[0]
    }

    fn check(&self) -> Result<()> {
        let (dm, inner) = (self.model_dim(), self.heads * self.head_dim);
        let expect = [[dm, inner], [dm, inner], [dm, inner], [inner, dm]];
        for (t, shape) in [&self.wq, &self.wk, &self.wv, &self.wo].into_iter().zip(expect) {
            if t.shape() != shape {
                return Err(Error::Shape { op: "attention_params", lhs: t.shape().to_vec(), rhs: shape.to_vec() });
            }
        }
        Ok(())
    }
}

/// Keys (after rotary encoding) and values a layer attended over, packed
/// `[rows × h·d]`.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub keys: Tensor,
    pub values: Tensor,
}

/// Multi-head windowed attention over `batch` packed sequences of `x[batch·n × D]`.
/// `positions[r]` is the absolute position of row `r`.
pub fn mswa_layer_batched(
    x: &Tensor,
    params: &AttentionParams,
    row: &[usize],
    batch: usize,
    positions: &[usize],
    execution: Execution,
) -> Result<(Tensor, LayerTrace)> {
    params.check()?;
    if row.len() != params.heads {
        return Err(Error::InvalidPlan(format!(
            "window row has {} entries, layer has {} heads",
            row.len(),
            params.heads
        )));
    }
    let rows = x.shape().first().copied().unwrap_or(0);
    if batch == 0 || rows % batch != 0 {
        return Err(Error::Shape { op: "mswa_layer", lhs: x.shape().to_vec(), rhs: vec![batch] });
    }
    let q = nn::rope(&x.matmul(&params.wq)?, params.heads, positions)?;
    let k = nn::rope(&x.matmul(&params.wk)?, params.heads, positions)?;
    let v = x.matmul(&params.wv)?;
    let layout = HeadLayout { batch, seq: rows / batch, heads: params.heads, head_dim: params.head_dim };
    let attended = multi_head_attention(&q, &k, &v, layout, row, execution)?;
    let out = attended.matmul(&params.wo)?;
    Ok((out, LayerTrace { keys: k, values: v }))
}

/// One sequence `x[n × D]` through a grouped multi-head window attention layer
/// whose head `j` uses window `row[j]`.
pub fn mswa_layer(x: &Tensor, params: &AttentionParams, row: &[usize]) -> Result<Tensor> {
    let n = x.shape().first().copied().unwrap_or(0);
    let positions: Vec<usize> = (0..n).collect();
    Ok(mswa_layer_batched(x, params, row, 1, &positions, Execution::Grouped)?.0)
}
