//! Softmax-free attention with a second-order Taylor feature map.
//!
//! `φ(x) = [1, x / d^¼, vec(x⊗x) / (√2·√d)]`, so that
//! `φ(q)·φ(k) = 1 + s + s²/2` with `s = q·k/√d`. The constant feature keeps
//! every causal denominator at least `i + 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernels::{self, LinearState};
use super::HeadLayout;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapConfig {
    /// Width `r` of the projected query/key rows fed to the map.
    pub proj_dim: usize,
    /// `d` in the `√d` scaling of the approximated exponent.
    pub normalizer: usize,
}

impl FeatureMapConfig {
    pub fn feature_len(&self) -> usize {
        1 + self.proj_dim + self.proj_dim * self.proj_dim
    }
}

fn featurize_row(x: &[f64], lin: f64, quad: f64, out: &mut [f64]) {
    let r = x.len();
    out[0] = 1.0;
    for a in 0..r {
        out[1 + a] = x[a] * lin;
        for b in 0..r {
            out[1 + r + a * r + b] = x[a] * x[b] * quad;
        }
    }
}

/// Applies the feature map to each of `heads` blocks of width `proj_dim` in
/// `x[rows × heads·proj_dim]`, giving `[rows × heads·feature_len]`.
pub fn taylor2_features(x: &Tensor, heads: usize, cfg: FeatureMapConfig) -> Result<Tensor> {
    let r = cfg.proj_dim;
    if x.rank() != 2 || x.shape()[1] != heads * r {
        return Err(Error::Shape { op: "taylor2_feature_map", lhs: x.shape().to_vec(), rhs: vec![heads * r] });
    }
    let rows = x.shape()[0];
    let fl = cfg.feature_len();
    let d = cfg.normalizer as f64;
    let lin = 1.0 / d.powf(0.25);
    let quad = 1.0 / (2f64.sqrt() * d.sqrt());
    let mut out = vec![0.0; rows * heads * fl];
    for (src, dst) in x.data().chunks(r).zip(out.chunks_mut(fl)) {
        featurize_row(src, lin, quad, dst);
    }
    let xs = x.clone();
    Ok(Tensor::from_op(out, vec![rows, heads * fl], &[x], move |g, _| {
        let mut back = vec![0.0; xs.numel()];
        for ((src, gr), dx) in xs.data().chunks(r).zip(g.chunks(fl)).zip(back.chunks_mut(r)) {
            let g2 = &gr[1 + r..];
            for a in 0..r {
                let mut acc = gr[1 + a] * lin;
                for b in 0..r {
                    acc += quad * (g2[a * r + b] + g2[b * r + a]) * src[b];
                }
                dx[a] = acc;
            }
        }
        vec![Some(back)]
    }))
}

/// Feature map of a single head, `x[n × r]` to `[n × (1 + r + r²)]`.
pub fn taylor2_feature_map(x: &Tensor, cfg: FeatureMapConfig) -> Result<Tensor> {
    taylor2_features(x, 1, cfg)
}

fn degenerate((position, value): (usize, f64)) -> Error {
    Error::NumericalDegeneracy { position, value }
}

/// Causal linear attention over packed heads: `fq`, `fk` are
/// `[batch·seq, heads·feature_len]`, `v` is `[batch·seq, heads·value_dim]`.
pub fn multi_head_linear_attention(
    fq: &Tensor,
    fk: &Tensor,
    v: &Tensor,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Tensor> {
    if fq.shape() != fk.shape() || fq.rank() != 2 || v.rank() != 2 || fq.shape()[0] != v.shape()[0] {
        return Err(Error::Shape { op: "linear_attention", lhs: fq.shape().to_vec(), rhs: v.shape().to_vec() });
    }
    if seq == 0 || batch == 0 {
        return Err(Error::EmptySequence);
    }
    let (rows, fwidth, vwidth) = (fq.shape()[0], fq.shape()[1], v.shape()[1]);
    if rows != batch * seq || fwidth % heads != 0 || vwidth % heads != 0 {
        return Err(Error::Shape { op: "linear_attention", lhs: fq.shape().to_vec(), rhs: vec![batch * seq, heads] });
    }
    let fl_layout = HeadLayout { batch, seq, heads, head_dim: fwidth / heads };
    let v_layout = HeadLayout { batch, seq, heads, head_dim: vwidth / heads };
    let (fl, d) = (fl_layout.head_dim, v_layout.head_dim);
    let units: Vec<(usize, usize)> = (0..batch).flat_map(|b| (0..heads).map(move |h| (b, h))).collect();
    let blocks: Vec<std::result::Result<Vec<f64>, (usize, f64)>> = units
        .par_iter()
        .map(|&(b, h)| {
            let (qb, kb, vb) =
                (fl_layout.gather(fq.data(), b, h), fl_layout.gather(fk.data(), b, h), v_layout.gather(v.data(), b, h));
            let mut state = LinearState::new(fl, d);
            let mut ob = vec![0.0; seq * d];
            kernels::linear_recurrent(&qb, &kb, &vb, seq, fl, d, &mut state, &mut ob)?;
            Ok(ob)
        })
        .collect();
    let mut out = vec![0.0; v.numel()];
    for (&(b, h), block) in units.iter().zip(blocks) {
        v_layout.scatter(&mut out, &block.map_err(degenerate)?, b, h);
    }

    let (qs, ks, vs) = (fq.clone(), fk.clone(), v.clone());
    Ok(Tensor::from_op(out, v.shape().to_vec(), &[fq, fk, v], move |g, o| {
        let grads: Vec<[Vec<f64>; 3]> = units
            .par_iter()
            .map(|&(b, h)| {
                let (qb, kb, vb) = (
                    fl_layout.gather(qs.data(), b, h),
                    fl_layout.gather(ks.data(), b, h),
                    v_layout.gather(vs.data(), b, h),
                );
                let (ob, gb) = (v_layout.gather(o, b, h), v_layout.gather(g, b, h));
                let (mut dq, mut dk, mut dv) = (vec![0.0; seq * fl], vec![0.0; seq * fl], vec![0.0; seq * d]);
                kernels::linear_backward(&qb, &kb, &vb, &ob, &gb, seq, fl, d, &mut dq, &mut dk, &mut dv);
                [dq, dk, dv]
            })
            .collect();
        let (mut dq, mut dk, mut dv) = (vec![0.0; qs.numel()], vec![0.0; ks.numel()], vec![0.0; vs.numel()]);
        for (&(b, h), [gq, gk, gv]) in units.iter().zip(&grads) {
            fl_layout.scatter(&mut dq, gq, b, h);
            fl_layout.scatter(&mut dk, gk, b, h);
            v_layout.scatter(&mut dv, gv, b, h);
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }))
}

/// Single-head causal linear attention on raw `q`, `k` rows of width
/// `cfg.proj_dim`; `v` may have any width.
pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: FeatureMapConfig) -> Result<Tensor> {
    let fq = taylor2_feature_map(q, cfg)?;
    let fk = taylor2_feature_map(k, cfg)?;
    let n = q.shape()[0];
    multi_head_linear_attention(&fq, &fk, v, 1, n, 1)
}
