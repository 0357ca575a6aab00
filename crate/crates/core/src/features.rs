//! Stand-in feature providers: a small strided conv encoder for the visual
//! pyramid, the L2/L3/L4 -> L5 fusion block, and text features that are read
//! from `CMBT` files or synthesized from mask geometry.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CmbError, Result};
use crate::imageio::Mask;
use crate::nn::{Conv2d, ConvReluBn, Ctx, Init, Module, NormRef};
use crate::tensor::{read_cmbt, write_cmbt, Parameter, Tensor};

/// Visual features L1..L4 (batched `[B, C_i, H_i, W_i]`) plus L5.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
    pub l5: Tensor,
}

impl FeaturePyramid {
    pub fn new(levels: [Tensor; 4], l5: Tensor) -> Result<Self> {
        for i in 0..3 {
            let (a, b) = (levels[i].shape(), levels[i + 1].shape());
            if a.len() != 4 || b.len() != 4 || a[2] != 2 * b[2] || a[3] != 2 * b[3] || a[0] != b[0] {
                return Err(CmbError::shape(format!(
                    "level L{} {a:?} is not twice L{} {b:?}",
                    i + 1,
                    i + 2
                )));
            }
        }
        if l5.rank() != 4 || l5.shape()[2..] != levels[3].shape()[2..] {
            return Err(CmbError::shape(format!(
                "L5 {:?} must share L4's grid {:?}",
                l5.shape(),
                levels[3].shape()
            )));
        }
        Ok(FeaturePyramid { levels, l5 })
    }
}

/// One encoder level: stride-2 conv3x3 + relu, then conv3x3 + relu.
#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Conv2d,
    conv: Conv2d,
}

/// Replaces the pretrained visual backbone; only its shape and
/// differentiability contracts matter downstream.
#[derive(Clone, Debug)]
pub struct StubEncoder {
    levels: Vec<EncoderLevel>,
}

impl StubEncoder {
    pub fn new(channels: [usize; 4], init: Init, rng: &mut impl Rng) -> Result<Self> {
        let mut cin = 3;
        let mut levels = Vec::with_capacity(4);
        for (i, &c) in channels.iter().enumerate() {
            levels.push(EncoderLevel {
                down: Conv2d::new(&format!("encoder.l{}.down", i + 1), cin, c, 3, 2, true, init, rng)?,
                conv: Conv2d::new(&format!("encoder.l{}.conv", i + 1), c, c, 3, 1, true, init, rng)?,
            });
            cin = c;
        }
        Ok(StubEncoder { levels })
    }

    /// `[B, 3, H, W]` (H, W divisible by 16) to L1..L4.
    pub fn forward(&self, images: &Tensor) -> Result<[Tensor; 4]> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(CmbError::shape(format!("encoder input must be [B,3,H,W], got {s:?}")));
        }
        if s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(CmbError::shape(format!(
                "image {}x{} not divisible by 16",
                s[2], s[3]
            )));
        }
        let mut h = images.clone();
        let mut out = Vec::with_capacity(4);
        for lvl in &self.levels {
            h = lvl.down.forward(&h)?.relu();
            h = lvl.conv.forward(&h)?.relu();
            out.push(h.clone());
        }
        Ok(out.try_into().expect("four levels"))
    }
}

impl Module for StubEncoder {
    fn params(&self) -> Vec<&Parameter> {
        self.levels
            .iter()
            .flat_map(|l| l.down.params().into_iter().chain(l.conv.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.levels
            .iter_mut()
            .flat_map(|l| l.down.params_mut().into_iter().chain(l.conv.params_mut()))
            .collect()
    }
}

/// Brings L2 and L3 onto L4's grid with strided convs, concatenates the
/// three, and maps to `c5` channels with conv3x3 + relu + batchnorm.
#[derive(Clone, Debug)]
pub struct L5Fuser {
    down2: [Conv2d; 2],
    down3: Conv2d,
    head: ConvReluBn,
}

impl L5Fuser {
    pub fn new(channels: [usize; 4], c5: usize, init: Init, rng: &mut impl Rng) -> Result<Self> {
        let [_, c2, c3, c4] = channels;
        let mut head = ConvReluBn::new("l5.head", c2 + c3 + c4, c5, rng)?;
        if init == Init::Zero {
            head.conv = Conv2d::new("l5.head.conv", c2 + c3 + c4, c5, 3, 1, true, Init::Zero, rng)?;
        }
        Ok(L5Fuser {
            down2: [
                Conv2d::new("l5.down2a", c2, c2, 3, 2, true, init, rng)?,
                Conv2d::new("l5.down2b", c2, c2, 3, 2, true, init, rng)?,
            ],
            down3: Conv2d::new("l5.down3", c3, c3, 3, 2, true, init, rng)?,
            head,
        })
    }

    pub fn forward(&self, l2: &Tensor, l3: &Tensor, l4: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let d2 = self.down2[1].forward(&self.down2[0].forward(l2)?.relu())?.relu();
        let d3 = self.down3.forward(l3)?.relu();
        if d2.shape()[2..] != l4.shape()[2..] || d3.shape()[2..] != l4.shape()[2..] {
            return Err(CmbError::shape(format!(
                "downsampled grids {:?} / {:?} do not match L4 {:?}",
                d2.shape(),
                d3.shape(),
                l4.shape()
            )));
        }
        self.head.forward(&Tensor::concat(&[d2, d3, l4.clone()], 1)?, ctx)
    }
}

impl Module for L5Fuser {
    fn params(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.down2.iter().flat_map(|c| c.params()).collect();
        v.extend(self.down3.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> = self.down2.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.down3.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn norms(&self) -> Vec<NormRef<'_>> {
        self.head.norms()
    }
}

/// Token features `[N, D_text]`, finite, `N >= 1`.
#[derive(Clone, Debug)]
pub struct TextFeatures(Tensor);

impl TextFeatures {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(CmbError::shape(format!(
                "text features must be [N, D], got {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(CmbError::Validation("text features contain non-finite values".into()));
        }
        Ok(TextFeatures(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_cmbt(path, &self.0)
    }
}

/// Reads a rank-2 `CMBT` file.
pub fn load_text_features(path: impl AsRef<Path>) -> Result<TextFeatures> {
    TextFeatures::new(read_cmbt(path)?)
}

/// `[cx, cy, width, height, 1]` of a mask's bounding box, coordinates
/// mapped to `[-1, 1]`.
pub fn mask_descriptor(mask: &Mask) -> [f64; 5] {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) > 0.5 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
                sy += y as f64;
                sx += x as f64;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return [0.0, 0.0, -1.0, -1.0, 1.0];
    }
    let norm = |v: f64, len: usize| 2.0 * (v + 0.5) / len as f64 - 1.0;
    [
        norm(sx / n, mask.w),
        norm(sy / n, mask.h),
        2.0 * (x1 - x0 + 1) as f64 / mask.w as f64 - 1.0,
        2.0 * (y1 - y0 + 1) as f64 / mask.h as f64 - 1.0,
        1.0,
    ]
}

const PROJECTION_SEED: u64 = 0x7E47_F00D;
const TEXT_NOISE: f64 = 0.05;

/// The fixed `[N * D, 5]` map from geometry descriptors to token features.
pub fn text_projection(tokens: usize, width: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED ^ ((tokens as u64) << 32) ^ width as u64);
    (0..tokens * width * 5)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / 5f64.sqrt()
        })
        .collect()
}

/// Projects a descriptor through [`text_projection`] and adds seeded noise.
pub fn project_descriptor(desc: &[f64; 5], tokens: usize, width: usize, rng: &mut impl Rng) -> Vec<f64> {
    let proj = text_projection(tokens, width);
    (0..tokens * width)
        .map(|i| {
            let clean: f64 = (0..5).map(|j| proj[i * 5 + j] * desc[j]).sum();
            let z: f64 = StandardNormal.sample(rng);
            clean + TEXT_NOISE * z
        })
        .collect()
}

/// Descriptor of a random box mask unrelated to any sample.
pub fn random_descriptor(rng: &mut impl Rng) -> [f64; 5] {
    let w: f64 = rng.random_range(0.15..0.6);
    let h: f64 = rng.random_range(0.15..0.6);
    let cx: f64 = rng.random_range(-1.0 + w..1.0 - w);
    let cy: f64 = rng.random_range(-1.0 + h..1.0 - h);
    [cx, cy, 2.0 * w - 1.0, 2.0 * h - 1.0, 1.0]
}

/// Synthetic token features: a fixed random projection of the true mask's
/// geometry when `matched`, otherwise of an unrelated random mask.
pub fn synth_text_features(
    mask: &Mask,
    matched: bool,
    seed: u64,
    tokens: usize,
    width: usize,
) -> Result<TextFeatures> {
    if tokens == 0 || width == 0 {
        return Err(CmbError::Argument("text features need N >= 1 and D >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let desc = if matched {
        mask_descriptor(mask)
    } else {
        random_descriptor(&mut rng)
    };
    let data = project_descriptor(&desc, tokens, width, &mut rng);
    TextFeatures::new(Tensor::new(data, &[tokens, width])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_rng;

    #[test]
    fn pyramid_shapes_for_64() {
        let enc = StubEncoder::new([8, 16, 24, 32], Init::He, &mut init_rng(1)).unwrap();
        let x = Tensor::full(&[1, 3, 64, 64], 0.3);
        let levels = enc.forward(&x).unwrap();
        let shapes: Vec<&[usize]> = levels.iter().map(|t| t.shape()).collect();
        assert_eq!(
            shapes,
            vec![&[1, 8, 32, 32][..], &[1, 16, 16, 16], &[1, 24, 8, 8], &[1, 32, 4, 4]]
        );
        let fuser = L5Fuser::new([8, 16, 24, 32], 32, Init::He, &mut init_rng(2)).unwrap();
        let l5 = fuser
            .forward(&levels[1], &levels[2], &levels[3], &Ctx::train(0))
            .unwrap();
        assert_eq!(l5.shape(), &[1, 32, 4, 4]);
        assert!(FeaturePyramid::new(levels, l5).is_ok());
    }

    #[test]
    fn indivisible_input_rejected() {
        let enc = StubEncoder::new([2, 2, 2, 2], Init::He, &mut init_rng(1)).unwrap();
        assert!(matches!(
            enc.forward(&Tensor::zeros(&[1, 3, 40, 64])),
            Err(CmbError::Shape(_))
        ));
    }

    #[test]
    fn zero_weights_give_zero_pyramid() {
        let ch = [4, 4, 4, 4];
        let enc = StubEncoder::new(ch, Init::Zero, &mut init_rng(1)).unwrap();
        let levels = enc.forward(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
        let fuser = L5Fuser::new(ch, 6, Init::Zero, &mut init_rng(1)).unwrap();
        let l5 = fuser.forward(&levels[1], &levels[2], &levels[3], &Ctx::train(0)).unwrap();
        assert!(l5.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn descriptor_of_centered_box() {
        let mut m = Mask::zeros(8, 8);
        for y in 2..6 {
            for x in 2..6 {
                m.data[y * 8 + x] = 1.0;
            }
        }
        let d = mask_descriptor(&m);
        assert!(d[0].abs() < 1e-12 && d[1].abs() < 1e-12);
        assert!(d[2].abs() < 1e-12 && d[3].abs() < 1e-12);
    }

    #[test]
    fn synth_is_deterministic() {
        let m = Mask::zeros(16, 16);
        let a = synth_text_features(&m, true, 9, 5, 16).unwrap();
        let b = synth_text_features(&m, true, 9, 5, 16).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
        assert_eq!(a.tensor().shape(), &[5, 16]);
    }
}
