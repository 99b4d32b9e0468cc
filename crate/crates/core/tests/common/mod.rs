//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use mswa::attention::AttentionParams;
use mswa::numerics::nn;
use mswa::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect(), shape).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `max|a − b| / max|b|`.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    max_abs_diff(a, b) / scale
}

/// Dense softmax attention of a single head with scores outside
/// `max(0, i − w)..=i` set to −∞ before the softmax. Returns the output and
/// the full `n × n` weight matrix.
pub fn dense_band_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut alpha = vec![0.0; n * n];
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let mut scores: Vec<f64> = (0..n)
            .map(|j| {
                if j > i || i - j > w {
                    f64::NEG_INFINITY
                } else {
                    (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() * scale
                }
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        scores.iter_mut().for_each(|s| *s = (*s - max).exp());
        let total: f64 = scores.iter().sum();
        for j in 0..n {
            alpha[i * n + j] = scores[j] / total;
            for c in 0..d {
                out[i * d + c] += alpha[i * n + j] * v[j * d + c];
            }
        }
    }
    (out, alpha)
}

/// Per-head dense oracle over packed `[n × h·d]` activations.
pub fn dense_multi_head(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, windows: &[usize]) -> Vec<f64> {
    let width = windows.len() * d;
    let mut out = vec![0.0; n * width];
    for (h, &w) in windows.iter().enumerate() {
        let take = |src: &[f64]| -> Vec<f64> {
            (0..n).flat_map(|i| src[i * width + h * d..i * width + (h + 1) * d].to_vec()).collect()
        };
        let (o, _) = dense_band_attention(&take(q), &take(k), &take(v), n, d, w);
        for i in 0..n {
            out[i * width + h * d..i * width + (h + 1) * d].copy_from_slice(&o[i * d..(i + 1) * d]);
        }
    }
    out
}

/// Plain matrix product of row-major `a[m×k]` and `b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// Compares autodiff gradients of the scalar `f` against central finite
/// differences at up to `samples` coordinates of each input. The error of an
/// input is `‖g − ĝ‖ / (‖g‖ + ‖ĝ‖)` over the sampled coordinates; returns the
/// worst input's error.
pub fn gradcheck(inputs: &[Tensor], samples: usize, f: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().requiring_grad()).collect();
    f(&leaves).backward().unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut pick = rng(17);
    for (idx, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let coords: Vec<usize> = if leaf.numel() <= samples {
            (0..leaf.numel()).collect()
        } else {
            (0..samples).map(|_| pick.random_range(0..leaf.numel())).collect()
        };
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for &c in &coords {
            let eval = |delta: f64| {
                let mut args: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
                let mut data = args[idx].data().to_vec();
                data[c] += delta;
                args[idx] = Tensor::new(data, args[idx].shape()).unwrap();
                f(&args).item().unwrap()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            diff += (analytic[c] - numeric).powi(2);
            norm_a += analytic[c].powi(2);
            norm_n += numeric.powi(2);
        }
        let denom = norm_a.sqrt() + norm_n.sqrt();
        if denom > 0.0 {
            worst = worst.max(diff.sqrt() / denom);
        }
    }
    worst
}

pub fn layer_params(seed: u64, heads: usize, d: usize) -> AttentionParams {
    let mut r = rng(seed);
    let dm = heads * d;
    AttentionParams {
        wq: random(&mut r, &[dm, dm], 0.4),
        wk: random(&mut r, &[dm, dm], 0.4),
        wv: random(&mut r, &[dm, dm], 0.4),
        wo: random(&mut r, &[dm, dm], 0.4),
        heads,
        head_dim: d,
    }
}

/// Projections, rotary encoding and the per-head dense oracle, assembled by hand.
pub fn layer_oracle(x: &Tensor, p: &AttentionParams, row: &[usize]) -> Vec<f64> {
    let (n, dm) = (x.shape()[0], x.shape()[1]);
    let positions: Vec<usize> = (0..n).collect();
    let proj = |w: &Tensor| Tensor::new(matmul(x.data(), w.data(), n, dm, dm), &[n, dm]).unwrap();
    let q = nn::rope(&proj(&p.wq), p.heads, &positions).unwrap();
    let k = nn::rope(&proj(&p.wk), p.heads, &positions).unwrap();
    let v = proj(&p.wv);
    let heads = dense_multi_head(q.data(), k.data(), v.data(), n, p.head_dim, row);
    matmul(&heads, p.wo.data(), n, dm, dm)
}
