//! Thresholded F1 / IoU on the finest prediction.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CmbError, Result};
use crate::imageio::Mask;
use crate::model::CmbNet;
use crate::nn::Ctx;
use crate::tensor::sigmoid;

/// `(F1, IoU)`; both are 1 when prediction and ground truth are empty.
pub fn f1_iou(pred: &[bool], gt: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(CmbError::shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let tp = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count() as f64;
    let fp = pred.iter().zip(gt).filter(|(p, g)| **p && !**g).count() as f64;
    let fn_ = pred.iter().zip(gt).filter(|(p, g)| !**p && **g).count() as f64;
    if tp + fp + fn_ == 0.0 {
        return Ok((1.0, 1.0));
    }
    Ok((2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_)))
}

/// Bilinear resize of one `h x w` plane with half-pixel centres and edge
/// clamping.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = Vec::with_capacity(ho * wo);
    for oy in 0..ho {
        let (y0, y1, fy) = coord(oy, h, ho);
        for ox in 0..wo {
            let (x0, x1, fx) = coord(ox, w, wo);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub f1: f64,
    pub iou: f64,
    pub matched: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ambiguity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub f1: f64,
    pub iou: f64,
    /// Mean ambiguity over matched / mismatched samples (gated models only).
    pub ambiguity_matched: Option<f64>,
    pub ambiguity_mismatched: Option<f64>,
    pub images: Vec<ImageScore>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Foreground probabilities at the ground-truth resolution, one plane per
/// image in `idx`.
pub fn predict(net: &CmbNet, data: &Dataset, idx: &[usize]) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
    let (img, txt, masks) = data.batch(idx)?;
    let fwd = net.forward(&img, Some(&txt), &mut Ctx::eval())?;
    let logits = fwd.mask_logits();
    let (h, w) = (logits.shape()[2], logits.shape()[3]);
    let planes = masks
        .iter()
        .enumerate()
        .map(|(b, g)| {
            if g.h % h != 0 || g.w % w != 0 || g.h / h != g.w / w {
                return Err(CmbError::shape(format!(
                    "prediction grid {h}x{w} does not divide mask {}x{}",
                    g.h, g.w
                )));
            }
            let plane = &logits.data()[b * h * w..(b + 1) * h * w];
            Ok(resize_bilinear(plane, h, w, g.h, g.w).into_iter().map(sigmoid).collect())
        })
        .collect::<Result<_>>()?;
    Ok((planes, fwd.ambiguity()))
}

pub fn binarize(probs: &[f64], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p > threshold).collect()
}

pub fn evaluate(net: &CmbNet, data: &Dataset, threshold: f64, batch: usize) -> Result<EvalReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CmbError::Argument(format!("threshold {threshold} outside (0, 1)")));
    }
    if data.is_empty() {
        return Err(CmbError::Argument("empty evaluation set".into()));
    }
    let mut images = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (probs, amb) = predict(net, data, chunk)?;
        for (j, &i) in chunk.iter().enumerate() {
            let s = &data.samples[i];
            let gt: Vec<bool> = s.mask.data.iter().map(|&v| v == 1.0).collect();
            let (f1, iou) = f1_iou(&binarize(&probs[j], threshold), &gt)?;
            images.push(ImageScore {
                id: s.id.clone(),
                f1,
                iou,
                matched: s.matched,
                ambiguity: amb.as_ref().map(|a| a[j]),
            });
        }
    }
    let amb = |want: bool| {
        mean(
            images
                .iter()
                .filter(|s| s.matched == want)
                .filter_map(|s| s.ambiguity),
        )
    };
    Ok(EvalReport {
        threshold,
        f1: mean(images.iter().map(|s| s.f1)).unwrap_or(0.0),
        iou: mean(images.iter().map(|s| s.iou)).unwrap_or(0.0),
        ambiguity_matched: amb(true),
        ambiguity_mismatched: amb(false),
        images,
    })
}

/// Writes a probability plane as an 8-bit PGM.
pub fn write_probability(path: impl AsRef<std::path::Path>, probs: &[f64], mask: &Mask) -> Result<()> {
    crate::imageio::write_pgm(path, probs, mask.h, mask.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_vec, init_rng};
    use crate::oracle::confusion_loop;

    #[test]
    fn hand_counts() {
        let gt = [true, true, false, false];
        assert_eq!(f1_iou(&gt, &gt).unwrap(), (1.0, 1.0));
        let (f1, iou) = f1_iou(&[true, false, false, false], &gt).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15 && (iou - 0.5).abs() < 1e-15);
        assert_eq!(f1_iou(&[false; 4], &[false; 4]).unwrap(), (1.0, 1.0));
        assert_eq!(f1_iou(&[true; 4], &[false; 4]).unwrap(), (0.0, 0.0));
        assert!(f1_iou(&[true], &gt).is_err());
    }

    #[test]
    fn matches_confusion_loop() {
        for seed in 0..20 {
            let v = gaussian_vec(&mut init_rng(seed), 200, 1.0);
            let pred: Vec<bool> = v[..100].iter().map(|&x| x > 0.2).collect();
            let gt: Vec<bool> = v[100..].iter().map(|&x| x > 0.5).collect();
            assert_eq!(f1_iou(&pred, &gt).unwrap(), confusion_loop(&pred, &gt));
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(resize_bilinear(&src, 3, 4, 3, 4), src);
        let up = resize_bilinear(&[2.5; 4], 2, 2, 4, 4);
        assert!(up.iter().all(|&v| v == 2.5));
        let ramp = resize_bilinear(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(ramp, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
