//! Model-level primitives: embedding, loss, normalization, gating, rotary positions.

use super::tensor::{expect_rank, shape_err, Tensor};
use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rows of `table` selected by `ids`.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    expect_rank("embedding", table, 2)?;
    let (vocab, dim) = (table.shape()[0], table.shape()[1]);
    if let Some(&token) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::Vocabulary { token, vocab });
    }
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        data.extend_from_slice(&table.data()[id * dim..(id + 1) * dim]);
    }
    let ids = ids.to_vec();
    Ok(Tensor::from_op(data, vec![ids.len(), dim], &[table], move |g, _| {
        let mut back = vec![0.0; vocab * dim];
        for (row, &id) in ids.iter().enumerate() {
            let dst = &mut back[id * dim..(id + 1) * dim];
            dst.iter_mut().zip(&g[row * dim..(row + 1) * dim]).for_each(|(a, b)| *a += b);
        }
        vec![Some(back)]
    }))
}

/// Per-row negative log-likelihoods of `targets` under `logits` (natural log).
pub fn token_nll(logits: &[f64], vocab: usize, targets: &[usize]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(row, &target)| {
            let z = &logits[row * vocab..(row + 1) * vocab];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - z[target]
        })
        .collect()
}

/// Mean token cross-entropy (nats) of `targets` under row logits.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    expect_rank("cross_entropy", logits, 2)?;
    let (rows, vocab) = (logits.shape()[0], logits.shape()[1]);
    if rows != targets.len() {
        return Err(Error::Shape { op: "cross_entropy", lhs: logits.shape().to_vec(), rhs: vec![targets.len()] });
    }
    if rows == 0 {
        return Err(Error::Data("cross_entropy over zero rows".into()));
    }
    if let Some(&token) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Vocabulary { token, vocab });
    }
    let nll = token_nll(logits.data(), vocab, targets);
    let mean = nll.iter().sum::<f64>() / rows as f64;
    let (src, targets) = (logits.clone(), targets.to_vec());
    Ok(Tensor::from_op(vec![mean], Vec::new(), &[logits], move |g, _| {
        let scale = g[0] / rows as f64;
        let mut back = vec![0.0; rows * vocab];
        for (row, &target) in targets.iter().enumerate() {
            let z = &src.data()[row * vocab..(row + 1) * vocab];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let out = &mut back[row * vocab..(row + 1) * vocab];
            for (o, v) in out.iter_mut().zip(z) {
                *o = scale * (v - max).exp() / total;
            }
            out[target] -= scale;
        }
        vec![Some(back)]
    }))
}

/// `x / rms(x) * gain` per row, with `rms = sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    expect_rank("rms_norm", x, 2)?;
    let (rows, dim) = (x.shape()[0], x.shape()[1]);
    if gain.shape() != [dim] {
        return Err(shape_err("rms_norm", x, gain));
    }
    let inv_rms: Vec<f64> = x
        .data()
        .chunks(dim)
        .map(|row| 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / dim as f64 + eps).sqrt())
        .collect();
    let mut data = Vec::with_capacity(rows * dim);
    for (row, r) in x.data().chunks(dim).zip(&inv_rms) {
        data.extend(row.iter().zip(gain.data()).map(|(v, g)| v * r * g));
    }
    let (xs, gs) = (x.clone(), gain.clone());
    Ok(Tensor::from_op(data, vec![rows, dim], &[x, gain], move |g, _| {
        let mut dx = vec![0.0; rows * dim];
        let mut dgain = vec![0.0; dim];
        for row in 0..rows {
            let r = inv_rms[row];
            let xr = &xs.data()[row * dim..(row + 1) * dim];
            let gr = &g[row * dim..(row + 1) * dim];
            let mut dot = 0.0;
            for j in 0..dim {
                dgain[j] += gr[j] * xr[j] * r;
                dot += gr[j] * gs.data()[j] * xr[j];
            }
            let coef = r * r * r * dot / dim as f64;
            for j in 0..dim {
                dx[row * dim + j] = r * gr[j] * gs.data()[j] - coef * xr[j];
            }
        }
        vec![Some(dx), Some(dgain)]
    }))
}

/// Gated linear unit core: `silu(gate) ⊙ up`.
pub fn swiglu(gate: &Tensor, up: &Tensor) -> Result<Tensor> {
    if gate.shape() != up.shape() {
        return Err(shape_err("swiglu", gate, up));
    }
    let data = gate.data().iter().zip(up.data()).map(|(a, b)| a * sigmoid(*a) * b).collect();
    let (a, b) = (gate.clone(), up.clone());
    Ok(Tensor::from_op(data, gate.shape().to_vec(), &[gate, up], move |g, _| {
        let mut da = Vec::with_capacity(g.len());
        let mut db = Vec::with_capacity(g.len());
        for ((g, a), b) in g.iter().zip(a.data()).zip(b.data()) {
            let s = sigmoid(*a);
            da.push(g * b * s * (1.0 + a * (1.0 - s)));
            db.push(g * a * s);
        }
        vec![Some(da), Some(db)]
    }))
}

/// Cos/sin tables for rotating `rows` rows of a `head_dim`-wide head, row `r`
/// at absolute position `positions[r]`.
fn rope_tables(positions: &[usize], head_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        for i in 0..half {
            let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

fn rotate(src: &[f64], heads: usize, head_dim: usize, cos: &[f64], sin: &[f64], inverse: bool) -> Vec<f64> {
    let half = head_dim / 2;
    let width = heads * head_dim;
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = vec![0.0; src.len()];
    for (row, (s_row, o_row)) in src.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        for h in 0..heads {
            for i in 0..half {
                let (c, s) = (cos[row * half + i], sign * sin[row * half + i]);
                let base = h * head_dim + 2 * i;
                let (x0, x1) = (s_row[base], s_row[base + 1]);
                o_row[base] = x0 * c - x1 * s;
                o_row[base + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

/// Rotary position encoding on `x[rows × heads·head_dim]`, rotating adjacent
/// pairs `(2i, 2i+1)` of each head by `position · 10000^(-2i/head_dim)`.
pub fn rope(x: &Tensor, heads: usize, positions: &[usize]) -> Result<Tensor> {
    expect_rank("rope", x, 2)?;
    let (rows, width) = (x.shape()[0], x.shape()[1]);
    if heads == 0 || width % heads != 0 || !(width / heads).is_multiple_of(2) || positions.len() != rows {
        return Err(Error::Shape { op: "rope", lhs: x.shape().to_vec(), rhs: vec![heads, positions.len()] });
    }
    let head_dim = width / heads;
    let (cos, sin) = rope_tables(positions, head_dim);
    let data = rotate(x.data(), heads, head_dim, &cos, &sin, false);
    Ok(Tensor::from_op(data, vec![rows, width], &[x], move |g, _| {
        vec![Some(rotate(g, heads, head_dim, &cos, &sin, true))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_vocab() {
        let logits = Tensor::zeros(&[3, 256]);
        let ce = cross_entropy(&logits, &[0, 17, 255]).unwrap().item().unwrap();
        assert!((ce - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn embedding_rejects_unknown_token() {
        let table = Tensor::zeros(&[4, 2]);
        assert!(matches!(embedding(&table, &[1, 4]), Err(Error::Vocabulary { token: 4, vocab: 4 })));
    }

    #[test]
    fn rms_norm_unit_gain_has_unit_rms() {
        let x = Tensor::new(vec![3.0, 4.0, -1.0, 0.5], &[1, 4]).unwrap();
        let y = rms_norm(&x, &Tensor::full(&[4], 1.0), 0.0).unwrap();
        let ms: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((ms - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rope_position_zero_is_identity_and_preserves_norm() {
        let x = Tensor::new((0..8).map(|v| v as f64 * 0.3 - 1.0).collect(), &[2, 4]).unwrap();
        let y = rope(&x, 1, &[0, 5]).unwrap();
        assert_eq!(&y.data()[..4], &x.data()[..4]);
        let n0: f64 = x.data()[4..].iter().map(|v| v * v).sum();
        let n1: f64 = y.data()[4..].iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-12);
    }

    #[test]
    fn rope_scores_depend_on_relative_offset() {
        let q = Tensor::new(vec![0.3, -0.7, 1.1, 0.2], &[1, 4]).unwrap();
        let k = Tensor::new(vec![-0.4, 0.9, 0.5, 0.6], &[1, 4]).unwrap();
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let s1 = dot(&rope(&q, 1, &[7]).unwrap(), &rope(&k, 1, &[3]).unwrap());
        let s2 = dot(&rope(&q, 1, &[14]).unwrap(), &rope(&k, 1, &[10]).unwrap());
        assert!((s1 - s2).abs() < 1e-12);
    }
}
