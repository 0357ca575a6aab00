use std::sync::Arc;

use super::{numel_of, Tensor};
use crate::error::{CmbError, Result};

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
/// `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(CmbError::shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        src_strides[i + offset] = if src[i] == 1 { 0 } else { stride };
        stride *= src[i];
    }
    let total = numel_of(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += src_strides[d];
            if idx[d] < out[d] {
                break;
            }
            pos -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

enum Operand {
    Same,
    Scalar,
    Mapped(Arc<Vec<usize>>),
}

impl Operand {
    fn new(src: &[usize], out: &[usize]) -> Operand {
        if src == out {
            Operand::Same
        } else if numel_of(src) == 1 {
            Operand::Scalar
        } else {
            Operand::Mapped(Arc::new(broadcast_map(src, out)))
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Operand::Same => i,
            Operand::Scalar => 0,
            Operand::Mapped(m) => m[i],
        }
    }
}

/// (axis-outer count, axis length, inner count) for a contiguous layout.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    fn zip_with(
        &self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        df: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let total = numel_of(&out_shape);
        let oa = Operand::new(self.shape(), &out_shape);
        let ob = Operand::new(other.shape(), &out_shape);
        let (a, b) = (self.data(), other.data());
        let data: Vec<f64> = (0..total).map(|i| f(a[oa.at(i)], b[ob.at(i)])).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let (a, b) = (pa.data(), pb.data());
                let mut ga = pa.requires_grad().then(|| vec![0.0; a.len()]);
                let mut gb = pb.requires_grad().then(|| vec![0.0; b.len()]);
                for (i, &gi) in g.iter().enumerate() {
                    let (ia, ib) = (oa.at(i), ob.at(i));
                    let (da, db) = df(a[ia], b[ib], gi);
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)))
    }

    /// Elementwise map; `df(x, y)` is the derivative given input and output.
    fn map(&self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, out| {
                let x = input.data();
                let grad = g
                    .iter()
                    .zip(x)
                    .zip(out)
                    .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    /// `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| scale * x + shift).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|&gi| gi * scale).collect())]),
        )
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.map(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Tensor {
        self.map(|x| x * x, |x, _| 2.0 * x)
    }

    /// `log(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&self) -> Tensor {
        self.map(softplus, |x, _| sigmoid(x))
    }

    /// Sign-preserving clamp to `|x| >= eps`; zero maps to `+eps`.
    pub fn clamp_abs_min(&self, eps: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| clamp_abs(x, eps)).collect();
        let input = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let grad = g
                    .iter()
                    .zip(input.data())
                    .map(|(&gi, &x)| if x.abs() >= eps { gi } else { 0.0 })
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    /// Elementwise binary cross-entropy between `sigmoid(self)` and a constant
    /// target, computed from logits without overflow.
    pub fn bce_with_logits(&self, target: &Tensor) -> Result<Tensor> {
        if self.shape() != target.shape() {
            return Err(CmbError::shape(format!(
                "bce logits {:?} vs target {:?}",
                self.shape(),
                target.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let (input, tgt) = (self.clone(), target.detach());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let grad = g
                    .iter()
                    .zip(input.data())
                    .zip(tgt.data())
                    .map(|((&gi, &x), &t)| gi * (sigmoid(x) - t))
                    .collect();
                vec![Some(grad)]
            }),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            reduced_shape(self.shape(), axis),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Maximum over `axis`, removing it. Ties route gradient to the first
    /// maximal entry.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = x[(o * len + a) * inner + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        arg[slot] = a;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            reduced_shape(self.shape(), axis),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        gx[(o * len + arg[slot]) * inner + i] += g[slot];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (x[at(a)] - m).exp();
                    y[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    y[at(a)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CmbError::shape(format!(
                "matmul needs [m,k]x[k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, &mut out, 0.0);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = pa.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, pb.data(), true, &mut ga, 0.0);
                    ga
                });
                let gb = pb.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, pa.data(), true, g, false, &mut gb, 0.0);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(CmbError::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(CmbError::shape(format!(
                "transpose needs rank 2, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        Ok(Tensor::from_op(
            transpose_buf(self.data(), r, c),
            vec![c, r],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(transpose_buf(g, c, r))]),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, full, inner) = axis_split(self.shape(), axis);
        if len == 0 || start + len > full {
            return Err(CmbError::shape(format!(
                "narrow [{start}, {}) out of axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        self.check_axis(axis)?;
        let total: usize = sizes.iter().sum();
        if total != self.shape()[axis] {
            return Err(CmbError::shape(format!(
                "split sizes {sizes:?} sum to {total}, axis {axis} of {:?} has {}",
                self.shape(),
                self.shape()[axis]
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let t = self.narrow(axis, start, len);
                start += len;
                t
            })
            .collect()
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| CmbError::shape("concat of zero tensors"))?;
        first.check_axis(axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(CmbError::shape(format!(
                    "concat along axis {axis}: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let full: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * full * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let chunk = len * inner;
                out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = full;
        let tracked: Vec<bool> = parts.iter().map(Tensor::requires_grad).collect();
        Ok(Tensor::from_op(
            out,
            shape,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut grads: Vec<Option<Vec<f64>>> = lens
                    .iter()
                    .zip(&tracked)
                    .map(|(&len, &t)| t.then(|| Vec::with_capacity(outer * len * inner)))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gp, &len) in grads.iter_mut().zip(&lens) {
                        let chunk = len * inner;
                        if let Some(gp) = gp {
                            gp.extend_from_slice(&g[pos..pos + chunk]);
                        }
                        pos += chunk;
                    }
                }
                grads
            }),
        ))
    }

    /// Rows of a 2-D tensor picked by index (repeats allowed).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(CmbError::shape(format!(
                "gather_rows needs rank 2, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(CmbError::shape(format!("row {bad} out of {r}")));
        }
        if rows.is_empty() {
            return Err(CmbError::shape("gather_rows with no rows"));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let rows = rows.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![rows.len(), c],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; r * c];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[k * c + j];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(CmbError::shape(format!(
                "axis {axis} invalid for shape {:?}",
                self.shape()
            )));
        }
        Ok(())
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

pub(crate) fn transpose_buf(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn clamp_abs(x: f64, eps: f64) -> f64 {
    if x >= 0.0 {
        x.max(eps)
    } else {
        x.min(-eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[0.0, 1.0], &[2, 1]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let s = t(&[0.0, 0.0, 0.0], &[3]).softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[1000.0, 0.0, 0.0], &[3]).softmax(0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] < 1e-12 && s.is_finite());
    }

    #[test]
    fn activation_definitions() {
        let x = t(&[-1.0, 2.0], &[2]);
        assert_eq!(x.relu().data(), &[0.0, 2.0]);
        assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
    }

    #[test]
    fn broadcast_mul_over_channels() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let g = t(&[10.0, 100.0], &[2, 1]);
        let y = x.mul(&g).unwrap();
        assert_eq!(y.data(), &[10.0, 20.0, 30.0, 400.0, 500.0, 600.0]);
        assert!(Tensor::zeros(&[2, 3]).add(&Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn split_sizes_must_cover_axis() {
        let x = Tensor::zeros(&[4, 2]);
        assert!(matches!(x.split(0, &[1, 2]), Err(CmbError::Shape(_))));
        assert_eq!(x.split(0, &[1, 3]).unwrap()[1].shape(), &[3, 2]);
    }

    #[test]
    fn detached_tensor_gets_no_grad() {
        let p = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let d = p.detach();
        let y = p.mul(&d).unwrap().sum();
        y.backward();
        assert_eq!(p.grad().unwrap(), vec![1.0, 2.0]);
        assert!(d.grad().is_none());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let p = Tensor::param(vec![3.0], &[1]).unwrap();
        let y = p.mul(&p).unwrap().add(&p).unwrap();
        y.backward();
        assert_eq!(p.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn clamp_preserves_sign() {
        let x = t(&[0.0, 1e-5, -1e-5, 0.5, -0.5], &[5]);
        assert_eq!(x.clamp_abs_min(1e-3).data(), &[1e-3, 1e-3, -1e-3, 0.5, -0.5]);
    }
}
