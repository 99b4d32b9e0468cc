//! Attention kernels: full causal, sliding window, Taylor-feature linear,
//! and the grouped multi-head layer that runs a row of a window plan.

pub mod kernels;
pub mod layer;
pub mod linear;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use kernels::LinearState;
pub use layer::{mswa_layer, mswa_layer_batched, AttentionParams, LayerTrace};
pub use linear::{
    linear_attention, multi_head_linear_attention, taylor2_feature_map, taylor2_features, FeatureMapConfig,
};

/// Window value that makes a head attend to its entire prefix.
pub const FULL_WINDOW: usize = usize::MAX;

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    for t in [q, k, v] {
        if t.rank() != 2 {
            return Err(Error::Rank { op: "attention", expected: 2, shape: t.shape().to_vec() });
        }
    }
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: if q.shape() != k.shape() { k.shape() } else { v.shape() }.to_vec(),
        });
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    Ok((n, d))
}

fn single_head(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Result<(Tensor, u64)> {
    let (n, d) = check_qkv(q, k, v)?;
    let mut out = vec![0.0; n * d];
    let pairs = kernels::window_forward(q.data(), k.data(), v.data(), n, d, window, &mut out);
    let (qs, ks, vs) = (q.clone(), k.clone(), v.clone());
    let t = Tensor::from_op(out, vec![n, d], &[q, k, v], move |g, o| {
        let (mut dq, mut dk, mut dv) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
        kernels::window_backward(qs.data(), ks.data(), vs.data(), o, g, n, d, window, &mut dq, &mut dk, &mut dv);
        vec![Some(dq), Some(dk), Some(dv)]
    });
    Ok((t, pairs))
}

/// Softmax attention of each position over itself and every earlier position.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(single_head(q, k, v, FULL_WINDOW)?.0)
}

/// Softmax attention of position `i` over positions `max(0, i−w)..=i`.
pub fn swa_attention(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Result<Tensor> {
    Ok(swa_attention_counted(q, k, v, window)?.0)
}

/// `swa_attention` plus the number of (query, key) pairs it scored.
pub fn swa_attention_counted(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Result<(Tensor, u64)> {
    if window < 1 {
        return Err(Error::Window(window));
    }
    single_head(q, k, v, window)
}

/// Shape of a packed multi-head activation `[batch·seq, heads·head_dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.shape() != [self.batch * self.seq, self.width()] {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: t.shape().to_vec(),
                rhs: vec![self.batch * self.seq, self.width()],
            });
        }
        Ok(())
    }

    /// Copies head `h` of sequence `b` into a contiguous `seq×head_dim` block.
    pub(crate) fn gather(&self, src: &[f64], b: usize, h: usize) -> Vec<f64> {
        let (w, d) = (self.width(), self.head_dim);
        let mut out = Vec::with_capacity(self.seq * d);
        for i in 0..self.seq {
            let row = (b * self.seq + i) * w + h * d;
            out.extend_from_slice(&src[row..row + d]);
        }
        out
    }

    pub(crate) fn scatter(&self, dst: &mut [f64], block: &[f64], b: usize, h: usize) {
        let (w, d) = (self.width(), self.head_dim);
        for i in 0..self.seq {
            let row = (b * self.seq + i) * w + h * d;
            dst[row..row + d].copy_from_slice(&block[i * d..(i + 1) * d]);
        }
    }
}

/// How `multi_head_attention` schedules its heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    /// Heads sharing a window are packed into one group buffer and run
    /// together; groups run one after another.
    Grouped,
    /// One head at a time, in head order.
    PerHead,
}

/// Groups heads by window size, ascending window, heads in index order.
pub fn head_groups(windows: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (h, &w) in windows.iter().enumerate() {
        groups.entry(w).or_default().push(h);
    }
    groups.into_iter().collect()
}

/// Windowed softmax attention over packed heads; head `h` uses `windows[h]`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: HeadLayout,
    windows: &[usize],
    execution: Execution,
) -> Result<Tensor> {
    for t in [q, k, v] {
        layout.check(t)?;
    }
    if windows.len() != layout.heads {
        return Err(Error::InvalidPlan(format!("window row has {} entries for {} heads", windows.len(), layout.heads)));
    }
    if let Some(&w) = windows.iter().find(|&&w| w < 1) {
        return Err(Error::Window(w));
    }
    if layout.seq == 0 {
        return Err(Error::EmptySequence);
    }
    let (n, d) = (layout.seq, layout.head_dim);
    let mut out = vec![0.0; q.numel()];
    match execution {
        Execution::PerHead => {
            for b in 0..layout.batch {
                for (h, &w) in windows.iter().enumerate() {
                    let (qb, kb, vb) =
                        (layout.gather(q.data(), b, h), layout.gather(k.data(), b, h), layout.gather(v.data(), b, h));
                    let mut ob = vec![0.0; n * d];
                    kernels::window_forward(&qb, &kb, &vb, n, d, w, &mut ob);
                    layout.scatter(&mut out, &ob, b, h);
                }
            }
        }
        Execution::Grouped => {
            for (w, members) in head_groups(windows) {
                let slab = n * d;
                let units: Vec<(usize, usize)> =
                    (0..layout.batch).flat_map(|b| members.iter().map(move |&h| (b, h))).collect();
                // group buffers laid out [unit][seq][head_dim]
                let pack =
                    |src: &[f64]| -> Vec<f64> { units.iter().flat_map(|&(b, h)| layout.gather(src, b, h)).collect() };
                let (qg, kg, vg) = (pack(q.data()), pack(k.data()), pack(v.data()));
                let mut og = vec![0.0; units.len() * slab];
                og.par_chunks_mut(slab).enumerate().for_each(|(u, ob)| {
                    let r = u * slab..(u + 1) * slab;
                    kernels::window_forward(&qg[r.clone()], &kg[r.clone()], &vg[r], n, d, w, ob);
                });
                for (u, &(b, h)) in units.iter().enumerate() {
                    layout.scatter(&mut out, &og[u * slab..(u + 1) * slab], b, h);
                }
            }
        }
    }

    let (qs, ks, vs) = (q.clone(), k.clone(), v.clone());
    let windows = windows.to_vec();
    Ok(Tensor::from_op(out, q.shape().to_vec(), &[q, k, v], move |g, o| {
        let units: Vec<(usize, usize)> =
            (0..layout.batch).flat_map(|b| (0..layout.heads).map(move |h| (b, h))).collect();
        let grads: Vec<[Vec<f64>; 3]> = units
            .par_iter()
            .map(|&(b, h)| {
                let (qb, kb, vb) =
                    (layout.gather(qs.data(), b, h), layout.gather(ks.data(), b, h), layout.gather(vs.data(), b, h));
                let (ob, gb) = (layout.gather(o, b, h), layout.gather(g, b, h));
                let (mut dq, mut dk, mut dv) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
                kernels::window_backward(&qb, &kb, &vb, &ob, &gb, n, d, windows[h], &mut dq, &mut dk, &mut dv);
                [dq, dk, dv]
            })
            .collect();
        let mut packed = [vec![0.0; o.len()], vec![0.0; o.len()], vec![0.0; o.len()]];
        for (&(b, h), unit) in units.iter().zip(&grads) {
            for (dst, block) in packed.iter_mut().zip(unit) {
                layout.scatter(dst, block, b, h);
            }
        }
        packed.into_iter().map(Some).collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_bad_window_are_rejected() {
        let z = Tensor::zeros(&[0, 4]);
        assert!(matches!(causal_attention(&z, &z, &z), Err(Error::EmptySequence)));
        let x = Tensor::zeros(&[3, 4]);
        assert!(matches!(swa_attention(&x, &x, &x, 0), Err(Error::Window(0))));
        let y = Tensor::zeros(&[3, 2]);
        assert!(matches!(causal_attention(&x, &y, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_queries_give_prefix_means() {
        let n = 6;
        let q = Tensor::zeros(&[n, 2]);
        let k = Tensor::new((0..n * 2).map(|x| (x as f64).sin()).collect(), &[n, 2]).unwrap();
        let v = Tensor::new((0..n * 2).map(|x| x as f64).collect(), &[n, 2]).unwrap();
        let o = causal_attention(&q, &k, &v).unwrap();
        for i in 0..n {
            for c in 0..2 {
                let mean = (0..=i).map(|j| v.data()[j * 2 + c]).sum::<f64>() / (i + 1) as f64;
                assert!((o.data()[i * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_follow_window_then_head_order() {
        let groups = head_groups(&[8, 2, 8, 2, 32]);
        assert_eq!(groups, vec![(2, vec![1, 3]), (8, vec![0, 2]), (32, vec![4])]);
    }

    #[test]
    fn row_length_must_match_heads() {
        let layout = HeadLayout { batch: 1, seq: 3, heads: 2, head_dim: 2 };
        let x = Tensor::zeros(&[3, 4]);
        assert!(multi_head_attention(&x, &x, &x, layout, &[1, 2, 3], Execution::Grouped).is_err());
    }
}
