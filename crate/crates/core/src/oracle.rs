//! Brute-force reference implementations.
//!
//! Everything here runs on plain `Vec`/slice data with scalar loops and
//! never calls into [`crate::tensor`]; tests and `verify` compare the tensor
//! path against these.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CmbError, Result};

pub type Mat = Vec<Vec<f64>>;

/// `|g - ĝ| / max(1, |g|, |ĝ|)`.
pub fn rel_err(g: f64, g_hat: f64) -> f64 {
    (g - g_hat).abs() / 1f64.max(g.abs()).max(g_hat.abs())
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        grad.push(fd_coordinate(&mut f, &mut xs, i, step)?);
    }
    Ok(grad)
}

/// Central difference along one coordinate; `x` is restored on return.
pub fn fd_coordinate(
    f: &mut impl FnMut(&[f64]) -> f64,
    x: &mut [f64],
    i: usize,
    step: f64,
) -> Result<f64> {
    let orig = x[i];
    x[i] = orig + step;
    let up = f(x);
    x[i] = orig - step;
    let down = f(x);
    x[i] = orig;
    if !up.is_finite() || !down.is_finite() {
        return Err(CmbError::Oracle(format!(
            "non-finite objective at coordinate {i}: f+ = {up}, f- = {down}"
        )));
    }
    Ok((up - down) / (2.0 * step))
}

/// For each row, the indices of the `k` nearest other rows by Euclidean
/// distance, ordered by (distance, index).
pub fn knn_exhaustive(rows: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..rows.len())
        .map(|n| {
            let mut cand: Vec<(f64, usize)> = (0..rows.len())
                .filter(|&m| m != n)
                .map(|m| {
                    let d2: f64 = rows[n]
                        .iter()
                        .zip(&rows[m])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d2.sqrt(), m)
                })
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().take(k).map(|(_, m)| m).collect()
        })
        .collect()
}

/// Monte Carlo estimate of `KL(p || q)` for diagonal Gaussians, returned with
/// its standard error.
pub fn mc_kl(
    mu_p: &[f64],
    sigma_p: &[f64],
    mu_q: &[f64],
    sigma_q: &[f64],
    samples: usize,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let log_pdf = |x: f64, mu: f64, s: f64| {
        let z = (x - mu) / s;
        -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mut lr = 0.0;
        for d in 0..mu_p.len() {
            let e: f64 = StandardNormal.sample(rng);
            let x = mu_p[d] + sigma_p[d] * e;
            lr += log_pdf(x, mu_p[d], sigma_p[d]) - log_pdf(x, mu_q[d], sigma_q[d]);
        }
        sum += lr;
        sum_sq += lr * lr;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `S[i][j] = sum_m softmax(X)[i][m] * X[j][m]`.
pub fn autocorrelation_loop(x: &Mat) -> Mat {
    let sm: Mat = x.iter().map(|r| softmax_row(r)).collect();
    let c = x.len();
    let mut s = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            for m in 0..x[0].len() {
                s[i][j] += sm[i][m] * x[j][m];
            }
        }
    }
    s
}

/// Central feature: max over every (row, neighbor) pair of the affine map
/// of `cat(s_n - s_j, s_j)`. `w` is `[2C][D]`, `b` is `[D]`.
pub fn central_feature_loop(s: &Mat, neighbors: &[Vec<usize>], w: &Mat, b: &[f64]) -> Vec<f64> {
    let c = s[0].len();
    let d = b.len();
    let mut out = vec![f64::NEG_INFINITY; d];
    for (n, nb) in neighbors.iter().enumerate() {
        for &j in nb {
            for o in 0..d {
                let mut v = b[o];
                for m in 0..c {
                    v += w[m][o] * (s[n][m] - s[j][m]);
                    v += w[c + m][o] * s[j][m];
                }
                out[o] = out[o].max(v);
            }
        }
    }
    out
}

/// 1x1 projection over channels: `out[o][p] = sum_c w[o][c] x[c][p] + b[o]`.
fn project_channels(w: &[f64], b: &[f64], x: &Mat) -> Mat {
    let cin = x.len();
    (0..b.len())
        .map(|o| {
            (0..x[0].len())
                .map(|p| b[o] + (0..cin).map(|c| w[o * cin + c] * x[c][p]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Per-token affine map: `out[n][o] = sum_d t[n][d] w[d][o] + b[o]`.
fn project_tokens(w: &[f64], b: &[f64], t: &Mat) -> Mat {
    let dout = b.len();
    t.iter()
        .map(|row| {
            (0..dout)
                .map(|o| b[o] + row.iter().enumerate().map(|(d, v)| v * w[d * dout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Weights of the five interaction projections, in the tensor layout:
/// channel maps `[out * in]`, token maps `[in * out]`.
pub struct InteractionWeights<'a> {
    pub alpha: (&'a [f64], &'a [f64]),
    pub beta: (&'a [f64], &'a [f64]),
    pub gamma: (&'a [f64], &'a [f64]),
    pub delta: (&'a [f64], &'a [f64]),
    pub theta: (&'a [f64], &'a [f64]),
    pub w1: f64,
    pub w2: f64,
}

/// Fused output `O` as `[C][HW]` given `X = L5` as `[C][HW]` and `T_a`.
pub fn interaction_loop(x: &Mat, t: &Mat, w: &InteractionWeights<'_>) -> Mat {
    let hw = x[0].len();
    let n_tok = t.len();
    let a = project_channels(w.alpha.0, w.alpha.1, x);
    let bm = project_channels(w.beta.0, w.beta.1, x);
    let g = project_channels(w.gamma.0, w.gamma.1, x);
    let dt = project_tokens(w.delta.0, w.delta.1, t);
    let th = project_tokens(w.theta.0, w.theta.1, t);
    let cq = a.len();

    let f_it: Mat = (0..hw)
        .map(|p| {
            let logits: Vec<f64> = (0..n_tok)
                .map(|n| (0..cq).map(|q| a[q][p] * dt[n][q]).sum())
                .collect();
            softmax_row(&logits)
        })
        .collect();
    let f_ir: Mat = (0..hw)
        .map(|p| {
            let logits: Vec<f64> = (0..hw)
                .map(|p2| (0..cq).map(|q| a[q][p] * bm[q][p2]).sum())
                .collect();
            softmax_row(&logits)
        })
        .collect();
    let mut cs = vec![vec![0.0; n_tok]; hw];
    for p in 0..hw {
        for n in 0..n_tok {
            for p2 in 0..hw {
                cs[p][n] += f_ir[p][p2] * f_it[p2][n];
            }
        }
    }
    let mut rf_it = vec![vec![0.0; n_tok]; hw];
    for p in 0..hw {
        for n in 0..n_tok {
            rf_it[p][n] = w.w1 * cs[p][n] + f_it[p][n];
        }
    }
    let mut rf_ir = vec![vec![0.0; hw]; hw];
    for p in 0..hw {
        for p2 in 0..hw {
            let mut m = 0.0;
            for n in 0..n_tok {
                m += cs[p][n] * f_it[p2][n];
            }
            rf_ir[p][p2] = w.w2 * m + f_ir[p][p2];
        }
    }
    let c = x.len();
    let mut o = vec![vec![0.0; hw]; c];
    for ch in 0..c {
        for p in 0..hw {
            let mut v = x[ch][p];
            for n in 0..n_tok {
                v += rf_it[p][n] * th[n][ch];
            }
            for p2 in 0..hw {
                v += rf_ir[p][p2] * g[ch][p2];
            }
            o[ch][p] = v;
        }
    }
    o
}

/// Single-image volume `[C][H][W]`.
pub type Vol = Vec<Mat>;

/// Zero-padded 3x3 (or 1x1) convolution, stride 1, weights `[out][in][k][k]`.
pub fn conv_loop(x: &Vol, w: &[f64], b: &[f64], k: usize) -> Vol {
    let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let pad = (k / 2) as isize;
    (0..b.len())
        .map(|o| {
            (0..h)
                .map(|y| {
                    (0..wd)
                        .map(|xx| {
                            let mut v = b[o];
                            for c in 0..cin {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = y as isize + ky as isize - pad;
                                        let ix = xx as isize + kx as isize - pad;
                                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                            v += w[((o * cin + c) * k + ky) * k + kx]
                                                * x[c][iy as usize][ix as usize];
                                        }
                                    }
                                }
                            }
                            v
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Training-mode batch norm of a single image (statistics over H x W).
pub fn batchnorm_loop(x: &Vol, gamma: &[f64], beta: &[f64], eps: f64) -> Vol {
    x.iter()
        .enumerate()
        .map(|(c, plane)| {
            let n = (plane.len() * plane[0].len()) as f64;
            let mean = plane.iter().flatten().sum::<f64>() / n;
            let var = plane.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            plane
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|v| gamma[c] * (v - mean) / (var + eps).sqrt() + beta[c])
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn relu_vol(x: &Vol) -> Vol {
    x.iter()
        .map(|p| p.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect())
        .collect()
}

pub fn add_vol(a: &Vol, b: &Vol) -> Vol {
    a.iter()
        .zip(b)
        .map(|(pa, pb)| {
            pa.iter()
                .zip(pb)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
                .collect()
        })
        .collect()
}

/// Raw weights of one conv3x3 -> relu -> batchnorm stage.
pub struct StageWeights {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn psi_loop(x: &Vol, stages: &[StageWeights], eps: f64) -> Vol {
    stages.iter().fold(x.clone(), |h, s| {
        batchnorm_loop(&relu_vol(&conv_loop(&h, &s.w, &s.b, 3)), &s.gamma, &s.beta, eps)
    })
}

/// Edge-guided residual branch for one image: returns `(m_i, M_i)`.
#[allow(clippy::too_many_arguments)]
pub fn egrm_loop(
    u: &Vol,
    e: &Mat,
    psi_c: &[StageWeights],
    psi_d: &[StageWeights],
    psi_e: &[StageWeights],
    head_w: &[f64],
    head_b: f64,
    eps: f64,
) -> (Vol, Mat) {
    let inner = psi_loop(&psi_loop(u, psi_e, eps), psi_d, eps);
    let ur = psi_loop(&add_vol(u, &inner), psi_c, eps);
    let m: Vol = ur
        .iter()
        .map(|plane| {
            plane
                .iter()
                .enumerate()
                .map(|(y, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(x, v)| v * sigmoid(e[y][x]) + v)
                        .collect()
                })
                .collect()
        })
        .collect();
    let head = conv_loop(&m, head_w, &[head_b], 1);
    (m, head.into_iter().next().expect("one channel"))
}

/// Weighted BCE and weighted IoU of logits against a binary mask, with
/// `w = 1 + 5 |avgpool_k(G) - G|` (zero padding counted in the average).
pub fn weighted_bce_iou_loop(logits: &Mat, g: &Mat, kernel: usize) -> (f64, f64) {
    let (h, w) = (g.len(), g[0].len());
    let r = (kernel / 2) as isize;
    let mut sw = 0.0;
    let mut sbce = 0.0;
    let mut inter = 0.0;
    let mut union = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += g[yy as usize][xx as usize];
                    }
                }
            }
            let avg = acc / (kernel * kernel) as f64;
            let wt = 1.0 + 5.0 * (avg - g[y][x]).abs();
            let p = sigmoid(logits[y][x]);
            let t = g[y][x];
            let bce = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            sw += wt;
            sbce += wt * bce;
            inter += wt * p * t;
            union += wt * (p + t - p * t);
        }
    }
    (sbce / sw, 1.0 - inter / union)
}

pub fn dice_loop(logits: &Mat, g: &Mat, smooth: f64) -> f64 {
    let mut pg = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (lr, gr) in logits.iter().zip(g) {
        for (&l, &t) in lr.iter().zip(gr) {
            let p = sigmoid(l);
            pg += p * t;
            sp += p;
            sg += t;
        }
    }
    1.0 - (2.0 * pg + smooth) / (sp + sg + smooth)
}

/// `dilate3x3(G) - erode3x3(G)`, ignoring out-of-bounds neighbours.
pub fn boundary_loop(g: &Mat) -> Mat {
    let (h, w) = (g.len(), g[0].len());
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let mut mx: f64 = 0.0;
            let mut mn: f64 = 1.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        let v = g[yy as usize][xx as usize];
                        mx = mx.max(v);
                        mn = mn.min(v);
                    }
                }
            }
            out[y][x] = mx - mn;
        }
    }
    out
}

/// `(F1, IoU)` from raw confusion counts; both are 1 when prediction and
/// ground truth are empty.
pub fn confusion_loop(pred: &[bool], gt: &[bool]) -> (f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return (1.0, 1.0);
    }
    let (tp, fp, fneg) = (tp as f64, fp as f64, fneg as f64);
    (2.0 * tp / (2.0 * tp + fp + fneg), tp / (tp + fp + fneg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fd_of_square() {
        let g = fd_gradient(|x| x[0] * x[0], &[3.0], 1e-6).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_of_softmax_sum_is_zero() {
        let f = |x: &[f64]| softmax_row(x).iter().sum::<f64>();
        let g = fd_gradient(f, &[0.3, -1.2, 2.0, 0.1], 1e-6).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8), "{g:?}");
    }

    #[test]
    fn fd_rejects_non_finite() {
        let err = fd_gradient(|x| x[0].ln(), &[0.0], 1e-6).unwrap_err();
        assert!(matches!(err, CmbError::Oracle(_)));
    }

    #[test]
    fn knn_on_planted_points() {
        // 1-D points at 0, 1, 3, 7, 8
        let rows: Vec<Vec<f64>> = [0.0, 1.0, 3.0, 7.0, 8.0].iter().map(|&v| vec![v]).collect();
        let nn = knn_exhaustive(&rows, 2);
        assert_eq!(nn[0], vec![1, 2]);
        assert_eq!(nn[1], vec![0, 2]);
        assert_eq!(nn[2], vec![1, 0]);
        assert_eq!(nn[3], vec![4, 2]);
        assert_eq!(nn[4], vec![3, 2]);
    }

    #[test]
    fn mc_kl_of_identical_gaussians_is_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mu = [0.3, -1.0, 2.0];
        let s = [0.5, 1.5, 1.0];
        let (est, se) = mc_kl(&mu, &s, &mu, &s, 10_000, &mut rng);
        assert!(est.abs() <= 3.0 * se + 1e-12, "{est} ± {se}");
    }

    #[test]
    fn confusion_hand_counts() {
        assert_eq!(confusion_loop(&[true, false], &[true, true]), (2.0 / 3.0, 0.5));
        assert_eq!(confusion_loop(&[false; 4], &[false; 4]), (1.0, 1.0));
    }
}
