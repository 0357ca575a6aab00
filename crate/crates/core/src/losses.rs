//! Mask and boundary objectives summed over the four decoder outputs.
//!
//! Every term is computed per image and averaged over the batch.

use crate::error::{CmbError, Result};
use crate::imageio::Mask;
use crate::red::BlockOutput;
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1.0;
const MAX_POOL_KERNEL: usize = 15;
const EDGE_WEIGHT: f64 = 5.0;

/// Box size for the pixel weights: `min(15, grid)`, reduced to odd so the
/// window stays centred.
pub fn pool_kernel(grid: usize) -> usize {
    let k = MAX_POOL_KERNEL.min(grid).max(1);
    if k % 2 == 0 {
        k - 1
    } else {
        k
    }
}

/// `1 + 5 |avgpool_k(G) - G|`, zero padding counted in the average.
pub fn pixel_weights(g: &Mask, kernel: usize) -> Vec<f64> {
    let (h, w) = (g.h, g.w);
    // summed-area table with a zero border
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                g.get(y, x) + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let r = kernel / 2;
    let area = (kernel * kernel) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
            out.push(1.0 + EDGE_WEIGHT * (s / area - g.get(y, x)).abs());
        }
    }
    out
}

fn check_targets(logits: &Tensor, targets: &[Mask]) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != 1 || s[0] != targets.len() {
        return Err(CmbError::shape(format!(
            "logits {s:?} against {} targets",
            targets.len()
        )));
    }
    for g in targets {
        if (g.h, g.w) != (s[2], s[3]) {
            return Err(CmbError::shape(format!(
                "target {}x{} vs logits grid {}x{}",
                g.h, g.w, s[2], s[3]
            )));
        }
        if g.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CmbError::Validation("target mask is not binary".into()));
        }
    }
    Ok((s[0], s[2], s[3]))
}

fn stack(targets: &[Mask], values: impl Fn(&Mask) -> Vec<f64>, h: usize, w: usize) -> Result<Tensor> {
    let data: Vec<f64> = targets.iter().flat_map(values).collect();
    Tensor::new(data, &[targets.len(), 1, h, w])
}

/// Per-image sums of a `[B, 1, H, W]` tensor, as `[B]`.
fn image_sums(t: &Tensor) -> Result<Tensor> {
    let b = t.shape()[0];
    t.reshape(&[b, t.numel() / b])?.sum_axis(1)
}

/// Weighted BCE and weighted IoU of mask logits; `targets` are already at
/// the logits' grid.
pub fn weighted_bce_iou(logits: &Tensor, targets: &[Mask]) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = check_targets(logits, targets)?;
    let k = pool_kernel(h.min(w));
    let omega = stack(targets, |g| pixel_weights(g, k), h, w)?;
    let g = stack(targets, |g| g.data.clone(), h, w)?;
    let sum_w = image_sums(&omega)?;
    let bce = image_sums(&logits.bce_with_logits(&g)?.mul(&omega)?)?
        .div(&sum_w)?
        .mean();
    let p = logits.sigmoid();
    let pg = p.mul(&g)?;
    let inter = image_sums(&pg.mul(&omega)?)?;
    let union = image_sums(&p.add(&g)?.sub(&pg)?.mul(&omega)?)?;
    let iou = inter.div(&union)?.neg().affine(1.0, 1.0).mean();
    Ok((bce, iou))
}

/// `1 - (2 Σpg + s) / (Σp + Σg + s)` with `s = 1`.
pub fn dice_loss(logits: &Tensor, targets: &[Mask]) -> Result<Tensor> {
    let (_, h, w) = check_targets(logits, targets)?;
    let g = stack(targets, |g| g.data.clone(), h, w)?;
    let p = logits.sigmoid();
    let num = image_sums(&p.mul(&g)?)?.affine(2.0, DICE_SMOOTH);
    let den = image_sums(&p)?.add(&image_sums(&g)?)?.affine(1.0, DICE_SMOOTH);
    Ok(num.div(&den)?.neg().affine(1.0, 1.0).mean())
}

/// Separable 3x3 max (`dilate`) or min (erode); out-of-bounds pixels are
/// skipped.
fn morph3(g: &Mask, dilate: bool) -> Vec<f64> {
    let pick = |a: f64, b: f64| if dilate { a.max(b) } else { a.min(b) };
    let (h, w) = (g.h, g.w);
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = g.get(y, x);
            if x > 0 {
                v = pick(v, g.get(y, x - 1));
            }
            if x + 1 < w {
                v = pick(v, g.get(y, x + 1));
            }
            rows[y * w + x] = v;
        }
    }
    let mut out = rows.clone();
    for y in 0..h {
        for x in 0..w {
            let mut v = rows[y * w + x];
            if y > 0 {
                v = pick(v, rows[(y - 1) * w + x]);
            }
            if y + 1 < h {
                v = pick(v, rows[(y + 1) * w + x]);
            }
            out[y * w + x] = v;
        }
    }
    out
}

/// Morphological gradient `dilate3x3(G) - erode3x3(G)`.
pub fn boundary_gt(g: &Mask) -> Result<Mask> {
    let d = morph3(g, true);
    let e = morph3(g, false);
    Mask::from_values(g.h, g.w, d.iter().zip(&e).map(|(a, b)| a - b).collect())
}

#[derive(Clone, Debug)]
pub struct BlockLoss {
    pub grid: usize,
    pub bce: Tensor,
    pub iou: Tensor,
    pub dice: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LossReport {
    pub blocks: Vec<BlockLoss>,
    pub total: Tensor,
}

impl LossReport {
    pub fn value(&self) -> f64 {
        self.total.item()
    }
}

/// Sums the mask terms of every block plus the Dice term of every block
/// that emits a boundary map. `masks` are full resolution, one per image.
pub fn total_loss(outputs: &[BlockOutput], masks: &[Mask]) -> Result<LossReport> {
    if outputs.is_empty() {
        return Err(CmbError::Argument("no decoder outputs".into()));
    }
    let mut blocks = Vec::with_capacity(outputs.len());
    let mut total: Option<Tensor> = None;
    let mut acc = |t: &Tensor| -> Result<()> {
        total = Some(match total.take() {
            Some(s) => s.add(t)?,
            None => t.clone(),
        });
        Ok(())
    };
    for out in outputs {
        let (h, w) = (out.m.shape()[2], out.m.shape()[3]);
        let g: Vec<Mask> = masks.iter().map(|m| m.resize_nearest(h, w)).collect();
        let (bce, iou) = weighted_bce_iou(&out.m, &g)?;
        acc(&bce)?;
        acc(&iou)?;
        let dice = match &out.e {
            Some(e) => {
                let edges = g.iter().map(boundary_gt).collect::<Result<Vec<_>>>()?;
                let d = dice_loss(e, &edges)?;
                acc(&d)?;
                Some(d)
            }
            None => None,
        };
        blocks.push(BlockLoss {
            grid: h,
            bce,
            iou,
            dice,
        });
    }
    Ok(LossReport {
        blocks,
        total: total.expect("at least one term"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_vec, init_rng};
    use crate::oracle::{boundary_loop, dice_loop, weighted_bce_iou_loop, Mat};

    fn mask_rows(m: &Mask) -> Mat {
        m.data.chunks(m.w).map(|r| r.to_vec()).collect()
    }

    fn logits_for(m: &Mask) -> Tensor {
        let data = m.data.iter().map(|&g| if g == 1.0 { 20.0 } else { -20.0 }).collect();
        Tensor::new(data, &[1, 1, m.h, m.w]).unwrap()
    }

    fn random_mask(h: usize, w: usize, seed: u64) -> Mask {
        let v = gaussian_vec(&mut init_rng(seed), h * w, 1.0);
        Mask::from_values(h, w, v.iter().map(|&x| if x > 0.3 { 1.0 } else { 0.0 }).collect()).unwrap()
    }

    #[test]
    fn kernel_sizes() {
        assert_eq!(pool_kernel(64), 15);
        assert_eq!(pool_kernel(15), 15);
        assert_eq!(pool_kernel(8), 7);
        assert_eq!(pool_kernel(4), 3);
        assert_eq!(pool_kernel(1), 1);
    }

    #[test]
    fn perfect_prediction_floor() {
        let g = random_mask(8, 8, 1);
        let (bce, iou) = weighted_bce_iou(&logits_for(&g), &[g.clone()]).unwrap();
        assert!(bce.item() < 1e-6 && iou.item() < 1e-6);
        assert!(bce.item() >= 0.0 && iou.item() >= 0.0);
    }

    #[test]
    fn uniform_target_has_unit_weights() {
        let g = Mask::zeros(6, 6);
        assert!(pixel_weights(&g, 5).iter().all(|&w| w == 1.0));
        let logits = Tensor::new(gaussian_vec(&mut init_rng(2), 36, 1.0), &[1, 1, 6, 6]).unwrap();
        let (bce, _) = weighted_bce_iou(&logits, &[g.clone()]).unwrap();
        let plain = logits.bce_with_logits(&Tensor::zeros(&[1, 1, 6, 6])).unwrap().mean();
        assert!((bce.item() - plain.item()).abs() < 1e-14);
    }

    #[test]
    fn one_tampered_pixel_matches_loop() {
        let mut g = Mask::zeros(4, 4);
        g.data[5] = 1.0;
        let logits: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin() * 2.0).collect();
        let t = Tensor::new(logits.clone(), &[1, 1, 4, 4]).unwrap();
        let (bce, iou) = weighted_bce_iou(&t, &[g.clone()]).unwrap();
        let lrows: Mat = logits.chunks(4).map(|r| r.to_vec()).collect();
        let (rb, ri) = weighted_bce_iou_loop(&lrows, &mask_rows(&g), 3);
        assert!((bce.item() - rb).abs() < 1e-12);
        assert!((iou.item() - ri).abs() < 1e-12);
    }

    #[test]
    fn batch_is_mean_of_images() {
        let (a, b) = (random_mask(8, 8, 3), random_mask(8, 8, 4));
        let la = gaussian_vec(&mut init_rng(5), 64, 1.0);
        let lb = gaussian_vec(&mut init_rng(6), 64, 1.0);
        let both = Tensor::new([la.clone(), lb.clone()].concat(), &[2, 1, 8, 8]).unwrap();
        let (bce, iou) = weighted_bce_iou(&both, &[a.clone(), b.clone()]).unwrap();
        let rows = |v: &[f64]| -> Mat { v.chunks(8).map(|r| r.to_vec()).collect() };
        let (b1, i1) = weighted_bce_iou_loop(&rows(&la), &mask_rows(&a), 7);
        let (b2, i2) = weighted_bce_iou_loop(&rows(&lb), &mask_rows(&b), 7);
        assert!((bce.item() - (b1 + b2) / 2.0).abs() < 1e-12);
        assert!((iou.item() - (i1 + i2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dice_cases() {
        let g = random_mask(32, 32, 7);
        assert!(dice_loss(&logits_for(&g), &[g.clone()]).unwrap().item() < 1e-3);
        let mut checker = Mask::zeros(8, 8);
        for i in 0..64 {
            checker.data[i] = ((i / 8 + i % 8) % 2) as f64;
        }
        let inverse = Mask::from_values(8, 8, checker.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(dice_loss(&logits_for(&inverse), &[checker.clone()]).unwrap().item() > 0.95);

        let g = random_mask(8, 8, 8);
        let l = gaussian_vec(&mut init_rng(9), 64, 1.5);
        let t = Tensor::new(l.clone(), &[1, 1, 8, 8]).unwrap();
        let expect = dice_loop(&l.chunks(8).map(|r| r.to_vec()).collect::<Mat>(), &mask_rows(&g), 1.0);
        assert!((dice_loss(&t, &[g]).unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn boundary_cases() {
        assert!(boundary_gt(&Mask::zeros(5, 5)).unwrap().is_empty());
        let mut dot = Mask::zeros(5, 5);
        dot.data[12] = 1.0;
        let ring = boundary_gt(&dot).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(ring.get(y, x), if inside { 1.0 } else { 0.0 });
            }
        }
        for seed in 0..5 {
            let g = random_mask(9, 7, seed);
            let e = boundary_gt(&g).unwrap();
            assert_eq!(mask_rows(&e), boundary_loop(&mask_rows(&g)));
            let d = morph3(&g, true);
            assert!(e.data.iter().zip(&d).all(|(a, b)| *a <= *b));
        }
    }

    #[test]
    fn non_binary_target_rejected() {
        let bad = Mask {
            h: 2,
            w: 2,
            data: vec![0.0, 0.5, 1.0, 0.0],
        };
        let t = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(weighted_bce_iou(&t, &[bad]), Err(CmbError::Validation(_))));
    }
}
