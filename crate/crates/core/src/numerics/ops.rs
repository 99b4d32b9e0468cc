use super::gemm::{gemm, MatRef};
use super::tensor::{expect_rank, shape_err, Tensor};
use crate::error::{Error, Result};

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl Tensor {
    fn zip_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self, other));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(data, self.shape().to_vec(), &[self, other], move |g, _| {
            let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
            let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * factor).collect();
        Tensor::from_op(data, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(g.iter().map(|x| x * factor).collect())]
        })
    }

    pub fn add_scalar(&self, offset: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + offset).collect();
        Tensor::from_op(data, self.shape().to_vec(), &[self], |g, _| vec![Some(g.to_vec())])
    }

    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![total], Vec::new(), &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        expect_rank("matmul", self, 2)?;
        expect_rank("matmul", other, 2)?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(shape_err("matmul", self, other));
        }
        let data = gemm(m, k, n, MatRef::rows(self.data(), k), MatRef::rows(other.data(), n));
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(data, vec![m, n], &[self, other], move |g, _| {
            let ga = a.requires_grad().then(|| gemm(m, n, k, MatRef::rows(g, n), MatRef::transposed(b.data(), n)));
            let gb = b.requires_grad().then(|| gemm(k, m, n, MatRef::transposed(a.data(), k), MatRef::rows(g, n)));
            vec![ga, gb]
        }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        expect_rank("transpose", self, 2)?;
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(Tensor::from_op(data, vec![n, m], &[self], move |g, _| {
            let mut back = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    back[i * n + j] = g[j * m + i];
                }
            }
            vec![Some(back)]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape { op: "reshape", lhs: self.shape().to_vec(), rhs: shape.to_vec() });
        }
        Ok(Tensor::from_op(self.data().to_vec(), shape.to_vec(), &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// Concatenates tensors of equal rank along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = *parts.first().ok_or_else(|| Error::Data("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::Rank { op: "concat", expected: axis + 1, shape: first.shape().to_vec() });
        }
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", first, p));
            }
        }
        let (outer, inner) = outer_inner(first.shape(), axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(data, shape, parts, move |g, _| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(outer * w)).collect();
            for o in 0..outer {
                let mut offset = o * row;
                for (grad, w) in grads.iter_mut().zip(&widths) {
                    grad.extend_from_slice(&g[offset..offset + w]);
                    offset += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Rank { op: "slice", expected: axis + 1, shape: self.shape().to_vec() });
        }
        let extent = self.shape()[axis];
        if start > end || end > extent {
            return Err(Error::Shape { op: "slice", lhs: self.shape().to_vec(), rhs: vec![start, end] });
        }
        let (outer, inner) = outer_inner(self.shape(), axis);
        let (src_row, dst_row) = (extent * inner, (end - start) * inner);
        let mut data = Vec::with_capacity(outer * dst_row);
        for o in 0..outer {
            let base = o * src_row + start * inner;
            data.extend_from_slice(&self.data()[base..base + dst_row]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        let numel = self.numel();
        Ok(Tensor::from_op(data, shape, &[self], move |g, _| {
            let mut back = vec![0.0; numel];
            for o in 0..outer {
                let base = o * src_row + start * inner;
                back[base..base + dst_row].copy_from_slice(&g[o * dst_row..(o + 1) * dst_row]);
            }
            vec![Some(back)]
        }))
    }

    /// Row-wise softmax. `mask[i*n + j] == false` excludes entry (i, j), which
    /// then comes out as exactly zero.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        expect_rank("softmax_rows", self, 2)?;
        let (m, n) = (self.shape()[0], self.shape()[1]);
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::Shape { op: "softmax_rows", lhs: self.shape().to_vec(), rhs: vec![mask.len()] });
            }
        }
        let keep = |idx: usize| mask.is_none_or(|mask| mask[idx]);
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = i * n..(i + 1) * n;
            let max = row.clone().filter(|&idx| keep(idx)).map(|idx| src[idx]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            let mut total = 0.0;
            for idx in row.clone() {
                if keep(idx) {
                    let e = (src[idx] - max).exp();
                    data[idx] = e;
                    total += e;
                }
            }
            data[row].iter_mut().for_each(|x| *x /= total);
        }
        Ok(Tensor::from_op(data, vec![m, n], &[self], move |g, y| {
            let mut back = vec![0.0; m * n];
            for i in 0..m {
                let row = i * n..(i + 1) * n;
                let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(g, y)| g * y).sum();
                for idx in row {
                    back[idx] = y[idx] * (g[idx] - dot);
                }
            }
            vec![Some(back)]
        }))
    }
}
