use std::sync::Mutex;

use super::ops::gemm;
use super::Tensor;
use crate::error::{CmbError, Result};

/// Geometry of one 2-D convolution over `[B, C, H, W]` inputs.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Running statistics of a batch-norm layer.
#[derive(Debug)]
pub struct BatchNormStats {
    inner: Mutex<(Vec<f64>, Vec<f64>)>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            inner: Mutex::new((vec![0.0; channels], vec![1.0; channels])),
        }
    }

    pub fn from_parts(mean: Vec<f64>, var: Vec<f64>) -> Self {
        assert_eq!(mean.len(), var.len());
        BatchNormStats {
            inner: Mutex::new((mean, var)),
        }
    }

    /// `(running_mean, running_var)`.
    pub fn snapshot(&self) -> (Vec<f64>, Vec<f64>) {
        self.inner.lock().expect("stats lock poisoned").clone()
    }

    pub fn set(&self, mean: Vec<f64>, var: Vec<f64>) {
        *self.inner.lock().expect("stats lock poisoned") = (mean, var);
    }

    fn update(&self, mean: &[f64], unbiased_var: &[f64], momentum: f64) {
        let mut g = self.inner.lock().expect("stats lock poisoned");
        let (rm, rv) = &mut *g;
        for c in 0..rm.len() {
            rm[c] = (1.0 - momentum) * rm[c] + momentum * mean[c];
            rv[c] = (1.0 - momentum) * rv[c] + momentum * unbiased_var[c];
        }
    }
}

impl Clone for BatchNormStats {
    fn clone(&self) -> Self {
        let (m, v) = self.snapshot();
        BatchNormStats::from_parts(m, v)
    }
}

impl Tensor {
    /// 2-D convolution of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]` weights,
    /// zero padding `pad` and stride `stride`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(CmbError::shape(format!(
                "conv2d input {xs:?} vs weight {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(CmbError::Argument("conv2d stride must be positive".into()));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(CmbError::shape(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(CmbError::shape(format!(
                    "conv2d bias {:?} for {cout} output channels",
                    bias.shape()
                )));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (k, p) = (geom.col_rows(), geom.out_pixels());
        let x = self.data();
        let wt = weight.data();
        let mut out = vec![0.0; b * cout * p];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
        for n in 0..b {
            let xin = &x[n * cin * h * w..(n + 1) * cin * h * w];
            let dst = &mut out[n * cout * p..(n + 1) * cout * p];
            if let Some(bias) = bias {
                for (c, &bv) in bias.data().iter().enumerate() {
                    dst[c * p..(c + 1) * p].fill(bv);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            if geom.is_pointwise() {
                gemm(cout, k, p, wt, false, xin, false, dst, beta);
            } else {
                im2col(xin, &geom, &mut col);
                gemm(cout, k, p, wt, false, &col, false, dst, beta);
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        let (xin_t, w_t) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let bias_tracked = bias.is_some_and(Tensor::requires_grad);
        Ok(Tensor::from_op(
            out,
            vec![b, cout, geom.ho, geom.wo],
            parents,
            Box::new(move |g, _| {
                let x = xin_t.data();
                let wt = w_t.data();
                let mut gx = xin_t.requires_grad().then(|| vec![0.0; x.len()]);
                let mut gw = w_t.requires_grad().then(|| vec![0.0; wt.len()]);
                let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { k * p }];
                let mut dcol = vec![0.0; k * p];
                for n in 0..b {
                    let go = &g[n * cout * p..(n + 1) * cout * p];
                    let xin = &x[n * cin * h * w..(n + 1) * cin * h * w];
                    if let Some(gw) = gw.as_mut() {
                        let src: &[f64] = if geom.is_pointwise() {
                            xin
                        } else {
                            im2col(xin, &geom, &mut col);
                            &col
                        };
                        gemm(cout, p, k, go, false, src, true, gw, 1.0);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxn = &mut gx[n * cin * h * w..(n + 1) * cin * h * w];
                        if geom.is_pointwise() {
                            gemm(k, cout, p, wt, true, go, false, gxn, 1.0);
                        } else {
                            gemm(k, cout, p, wt, true, go, false, &mut dcol, 0.0);
                            col2im_add(&dcol, &geom, gxn);
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(bias_tracked.then(|| {
                        let mut gb = vec![0.0; cout];
                        for n in 0..b {
                            for (c, gbc) in gb.iter_mut().enumerate() {
                                let base = (n * cout + c) * p;
                                *gbc += g[base..base + p].iter().sum::<f64>();
                            }
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }

    /// Batch normalization over axis 1 of a `[B, C, ...]` tensor.
    ///
    /// In training mode the batch statistics normalize the input and update
    /// `stats` with the given momentum; otherwise the running statistics are
    /// used and the map is affine.
    pub fn batch_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        stats: &BatchNormStats,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() < 2 || gamma.shape() != [xs[1]] || beta.shape() != [xs[1]] {
            return Err(CmbError::shape(format!(
                "batch_norm input {xs:?}, gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let (b, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let count = (b * inner) as f64;
        let x = self.data();
        let at = move |n: usize, ch: usize| (n * c + ch) * inner;

        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for n in 0..b {
                    s += x[at(n, ch)..at(n, ch) + inner].iter().sum::<f64>();
                }
                let m = s / count;
                let mut v = 0.0;
                for n in 0..b {
                    v += x[at(n, ch)..at(n, ch) + inner]
                        .iter()
                        .map(|&xi| (xi - m) * (xi - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            let unbiased: Vec<f64> = if count > 1.0 {
                var.iter().map(|v| v * count / (count - 1.0)).collect()
            } else {
                var.clone()
            };
            stats.update(&mean, &unbiased, momentum);
            (mean, var)
        } else {
            stats.snapshot()
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let (gm, bt) = (gamma.data(), beta.data());
        for n in 0..b {
            for ch in 0..c {
                let base = at(n, ch);
                for i in base..base + inner {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = gm[ch] * xhat[i] + bt[ch];
                }
            }
        }

        let (gamma_t, beta_t) = (gamma.clone(), beta.clone());
        let x_tracked = self.requires_grad();
        Ok(Tensor::from_op(
            out,
            xs.to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _| {
                let gm = gamma_t.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for n in 0..b {
                    for ch in 0..c {
                        let base = at(n, ch);
                        for i in base..base + inner {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let gx = x_tracked.then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for n in 0..b {
                        for ch in 0..c {
                            let base = at(n, ch);
                            for i in base..base + inner {
                                gx[i] = if training {
                                    gm[ch] * inv_std[ch] / count
                                        * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    g[i] * gm[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    gamma_t.requires_grad().then_some(dgamma),
                    beta_t.requires_grad().then_some(dbeta),
                ]
            }),
        ))
    }

    /// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 || factor == 0 {
            return Err(CmbError::shape(format!(
                "upsample_nearest x{factor} on {xs:?}"
            )));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h * factor, w * factor);
        let x = self.data();
        let mut out = vec![0.0; planes * ho * wo];
        for pl in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[(pl * ho + oy) * wo + ox] = x[(pl * h + oy / factor) * w + ox / factor];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![xs[0], xs[1], ho, wo],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; planes * h * w];
                for pl in 0..planes {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            gx[(pl * h + oy / factor) * w + ox / factor] +=
                                g[(pl * ho + oy) * wo + ox];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Maximum over all spatial positions: `[B, C, H, W] -> [B, C]`.
    pub fn global_maxpool(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(CmbError::shape(format!("global_maxpool on {xs:?}")));
        }
        self.reshape(&[xs[0], xs[1], xs[2] * xs[3]])?.max_axis(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1x1_identity_reproduces_input() {
        let x = Tensor::new((0..24).map(f64::from).collect(), &[1, 3, 2, 4]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = Tensor::new(eye, &[3, 3, 1, 1]).unwrap();
        assert_eq!(x.conv2d(&w, None, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn conv3x3_same_padding_keeps_grid() {
        let x = Tensor::ones(&[2, 2, 5, 7]);
        let w = Tensor::ones(&[4, 2, 3, 3]);
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 7]);
        // interior sees 2 * 9 ones, corner sees 2 * 4
        assert_eq!(y.data()[7 + 1], 18.0);
        assert_eq!(y.data()[0], 8.0);
        let y2 = x.conv2d(&w, None, 2, 1).unwrap();
        assert_eq!(y2.shape(), &[2, 4, 3, 4]);
    }

    #[test]
    fn batchnorm_eval_is_deterministic_affine() {
        let stats = BatchNormStats::from_parts(vec![1.0, -1.0], vec![4.0, 0.25]);
        let x = Tensor::new((0..8).map(f64::from).collect(), &[1, 2, 2, 2]).unwrap();
        let gamma = Tensor::new(vec![2.0, 1.0], &[2]).unwrap();
        let beta = Tensor::new(vec![0.5, 0.0], &[2]).unwrap();
        let y1 = x.batch_norm(&gamma, &beta, &stats, false, 0.1, 1e-5).unwrap();
        let y2 = x.batch_norm(&gamma, &beta, &stats, false, 0.1, 1e-5).unwrap();
        assert_eq!(y1.data(), y2.data());
        let expect = 2.0 * (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt() + 0.5;
        assert!((y1.data()[3] - expect).abs() < 1e-12);
        assert_eq!(stats.snapshot().0, vec![1.0, -1.0]);
    }

    #[test]
    fn batchnorm_train_updates_running_stats() {
        let stats = BatchNormStats::new(1);
        let x = Tensor::new(vec![1.0, 3.0], &[2, 1]).unwrap();
        let y = x
            .batch_norm(&Tensor::ones(&[1]), &Tensor::zeros(&[1]), &stats, true, 0.1, 0.0)
            .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
        let (m, v) = stats.snapshot();
        assert!((m[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((v[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = x.upsample_nearest(2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(&y.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&y.data()[12..], &[3.0, 3.0, 4.0, 4.0]);
    }
}
