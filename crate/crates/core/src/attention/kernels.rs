//! Slice-level kernels for one head of one sequence. Inputs are contiguous
//! row-major `n×d` blocks.

/// First key position attended by query `i` under window `w`: `w`
/// predecessors plus the query itself.
#[inline]
pub fn window_start(i: usize, window: usize) -> usize {
    i.saturating_sub(window)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax attention of every query over keys `window_start(i, w)..=i`.
/// Masked positions are excluded from the sums, never added as large
/// negative scores. Returns the number of attended (query, key) pairs.
pub fn window_forward(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, window: usize, out: &mut [f64]) -> u64 {
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = Vec::with_capacity(n.min(window.saturating_add(1)));
    let mut pairs = 0u64;
    for i in 0..n {
        let lo = window_start(i, window);
        let qi = &q[i * d..(i + 1) * d];
        scores.clear();
        scores.extend((lo..=i).map(|j| dot(qi, &k[j * d..(j + 1) * d]) * scale));
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        oi.fill(0.0);
        for (p, j) in scores.iter().zip(lo..=i) {
            let weight = p / total;
            oi.iter_mut().zip(&v[j * d..(j + 1) * d]).for_each(|(o, vj)| *o += weight * vj);
        }
        pairs += (i - lo + 1) as u64;
    }
    pairs
}

/// Gradients of `window_forward` with respect to q, k and v, given the
/// forward output `o` and its upstream gradient `grad_o`.
#[allow(clippy::too_many_arguments)]
pub fn window_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    o: &[f64],
    grad_o: &[f64],
    n: usize,
    d: usize,
    window: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = Vec::new();
    for i in 0..n {
        let lo = window_start(i, window);
        let qi = &q[i * d..(i + 1) * d];
        let gi = &grad_o[i * d..(i + 1) * d];
        probs.clear();
        probs.extend((lo..=i).map(|j| dot(qi, &k[j * d..(j + 1) * d]) * scale));
        let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            total += *p;
        }
        probs.iter_mut().for_each(|p| *p /= total);

        let centre = dot(gi, &o[i * d..(i + 1) * d]);
        for (p, j) in probs.iter().zip(lo..=i) {
            let vj = &v[j * d..(j + 1) * d];
            dv[j * d..(j + 1) * d].iter_mut().zip(gi).for_each(|(a, g)| *a += p * g);
            let ds = p * (dot(gi, vj) - centre) * scale;
            let kj = &k[j * d..(j + 1) * d];
            dq[i * d..(i + 1) * d].iter_mut().zip(kj).for_each(|(a, kv)| *a += ds * kv);
            dk[j * d..(j + 1) * d].iter_mut().zip(qi).for_each(|(a, qv)| *a += ds * qv);
        }
    }
}

/// Running linear-attention sums `S = Σ φ(k)ᵀv` (feature_len × d, row-major)
/// and `z = Σ φ(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearState {
    pub feature_len: usize,
    pub value_dim: usize,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
}

impl LinearState {
    pub fn new(feature_len: usize, value_dim: usize) -> Self {
        LinearState { feature_len, value_dim, s: vec![0.0; feature_len * value_dim], z: vec![0.0; feature_len] }
    }

    pub fn absorb(&mut self, fk: &[f64], v: &[f64]) {
        let d = self.value_dim;
        for (f, &kf) in fk.iter().enumerate() {
            self.z[f] += kf;
            self.s[f * d..(f + 1) * d].iter_mut().zip(v).for_each(|(s, vc)| *s += kf * vc);
        }
    }

    /// `φ(q)·S / φ(q)·z` into `out`; returns the denominator.
    pub fn read(&self, fq: &[f64], out: &mut [f64]) -> f64 {
        let d = self.value_dim;
        out.fill(0.0);
        let mut den = 0.0;
        for (f, &qf) in fq.iter().enumerate() {
            den += qf * self.z[f];
            out.iter_mut().zip(&self.s[f * d..(f + 1) * d]).for_each(|(o, s)| *o += qf * s);
        }
        out.iter_mut().for_each(|o| *o /= den);
        den
    }

    pub fn scalars(&self) -> usize {
        self.s.len() + self.z.len()
    }
}

/// Recurrent (accumulator) evaluation. On a non-positive denominator returns
/// `Err((position, value))`.
pub fn linear_recurrent(
    fq: &[f64],
    fk: &[f64],
    v: &[f64],
    n: usize,
    feature_len: usize,
    d: usize,
    state: &mut LinearState,
    out: &mut [f64],
) -> Result<(), (usize, f64)> {
    for i in 0..n {
        state.absorb(&fk[i * feature_len..(i + 1) * feature_len], &v[i * d..(i + 1) * d]);
        let den = state.read(&fq[i * feature_len..(i + 1) * feature_len], &mut out[i * d..(i + 1) * d]);
        if den.is_nan() || den <= 0.0 {
            return Err((i, den));
        }
    }
    Ok(())
}

/// Quadratic evaluation through the explicit causal similarity matrix
/// `A_ij = φ(q_i)·φ(k_j)`, `o = A v / A 1`.
pub fn linear_parallel(fq: &[f64], fk: &[f64], v: &[f64], n: usize, feature_len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let qi = &fq[i * feature_len..(i + 1) * feature_len];
        let mut den = 0.0;
        let oi = &mut out[i * d..(i + 1) * d];
        for j in 0..=i {
            let a = dot(qi, &fk[j * feature_len..(j + 1) * feature_len]);
            den += a;
            oi.iter_mut().zip(&v[j * d..(j + 1) * d]).for_each(|(o, vj)| *o += a * vj);
        }
        oi.iter_mut().for_each(|o| *o /= den);
    }
    out
}

/// Linear-time gradients of `linear_recurrent` from a zero initial state.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    fq: &[f64],
    fk: &[f64],
    v: &[f64],
    o: &[f64],
    grad_o: &[f64],
    n: usize,
    feature_len: usize,
    d: usize,
    dfq: &mut [f64],
    dfk: &mut [f64],
    dv: &mut [f64],
) {
    let fl = feature_len;
    // Per-position gradients of the numerator and denominator.
    let mut dnum = vec![0.0; n * d];
    let mut dden = vec![0.0; n];
    let mut state = LinearState::new(fl, d);
    let mut scratch = vec![0.0; d];
    for i in 0..n {
        state.absorb(&fk[i * fl..(i + 1) * fl], &v[i * d..(i + 1) * d]);
        let qi = &fq[i * fl..(i + 1) * fl];
        let den = state.read(qi, &mut scratch);
        let gi = &grad_o[i * d..(i + 1) * d];
        dnum[i * d..(i + 1) * d].iter_mut().zip(gi).for_each(|(a, g)| *a = g / den);
        dden[i] = -dot(gi, &o[i * d..(i + 1) * d]) / den;
        let dq = &mut dfq[i * fl..(i + 1) * fl];
        for f in 0..fl {
            dq[f] += dot(&state.s[f * d..(f + 1) * d], &dnum[i * d..(i + 1) * d]) + state.z[f] * dden[i];
        }
    }
    // Suffix sums R = Σ_{i≥j} φ(q_i) ⊗ dnum_i and r = Σ_{i≥j} dden_i φ(q_i).
    let mut big_r = vec![0.0; fl * d];
    let mut small_r = vec![0.0; fl];
    for j in (0..n).rev() {
        let qj = &fq[j * fl..(j + 1) * fl];
        let dn = &dnum[j * d..(j + 1) * d];
        for f in 0..fl {
            big_r[f * d..(f + 1) * d].iter_mut().zip(dn).for_each(|(r, g)| *r += qj[f] * g);
            small_r[f] += dden[j] * qj[f];
        }
        let kj = &fk[j * fl..(j + 1) * fl];
        let vj = &v[j * d..(j + 1) * d];
        let dk = &mut dfk[j * fl..(j + 1) * fl];
        let dvj = &mut dv[j * d..(j + 1) * d];
        for f in 0..fl {
            let row = &big_r[f * d..(f + 1) * d];
            dk[f] += dot(row, vj) + small_r[f];
            dvj.iter_mut().zip(row).for_each(|(a, r)| *a += kj[f] * r);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_attends_to_itself() {
        let (q, k, v) = ([0.3, -0.2], [1.0, 2.0], [4.0, -5.0]);
        let mut out = [0.0; 2];
        assert_eq!(window_forward(&q, &k, &v, 1, 2, 3, &mut out), 1);
        assert_eq!(out, v);
    }

    #[test]
    fn window_one_with_equal_scores_averages_neighbours() {
        let n = 5;
        let q = vec![0.0; n * 2];
        let k: Vec<f64> = (0..n * 2).map(|x| x as f64).collect();
        let v: Vec<f64> = (0..n * 2).map(|x| (x * x) as f64).collect();
        let mut out = vec![0.0; n * 2];
        let pairs = window_forward(&q, &k, &v, n, 2, 1, &mut out);
        assert_eq!(pairs, 1 + 2 * (n as u64 - 1));
        for i in 1..n {
            for c in 0..2 {
                let want = (v[(i - 1) * 2 + c] + v[i * 2 + c]) / 2.0;
                assert!((out[i * 2 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_single_token_returns_value() {
        let fq = [1.0, 0.5, -0.25];
        let fk = [1.0, 0.1, 0.7];
        let v = [3.0, -1.0];
        let mut state = LinearState::new(3, 2);
        let mut out = [0.0; 2];
        linear_recurrent(&fq, &fk, &v, 1, 3, 2, &mut state, &mut out).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-15 && (out[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn linear_reports_degenerate_denominator() {
        let fq = [1.0, -2.0];
        let fk = [1.0, 1.0];
        let v = [1.0];
        let mut state = LinearState::new(2, 1);
        let mut out = [0.0];
        let err = linear_recurrent(&fq, &fk, &v, 1, 2, 1, &mut state, &mut out).unwrap_err();
        assert_eq!(err, (0, -1.0));
    }
}
