//! Restoration edge decoder: four blocks, each an invertible coupling (ERM)
//! that emits a boundary map gating an edge-guided residual branch (EGRM).
//!
//! All tensors are batched `[B, C, H, W]`.

use rand::Rng;

use crate::error::{CmbError, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Init, Module, NormRef, Psi};
use crate::tensor::{Parameter, Tensor};

pub const EPS_DIV: f64 = 1e-3;

/// How the coupling handles small `ψ_b(re2)` values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DivisionGuard {
    /// Sign-preserving clamp to `|·| >= eps`, used in both directions.
    Clamp(f64),
    /// Any `|ψ_b(re2)| < eps` is a singularity error.
    Strict(f64),
}

impl Default for DivisionGuard {
    fn default() -> Self {
        DivisionGuard::Clamp(EPS_DIV)
    }
}

impl DivisionGuard {
    fn apply(self, s: Tensor) -> Result<Tensor> {
        match self {
            DivisionGuard::Clamp(eps) => Ok(s.clamp_abs_min(eps)),
            DivisionGuard::Strict(eps) => {
                let sh = s.shape();
                let (c, h, w) = (sh[1], sh[2], sh[3]);
                if let Some((i, &v)) = s.data().iter().enumerate().find(|(_, v)| v.abs() < eps) {
                    return Err(CmbError::Singularity {
                        position: [i / (c * h * w), i / (h * w) % c, i / w % h, i % w],
                        value: v,
                        eps,
                    });
                }
                Ok(s)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CouplingState {
    pub e1: Tensor,
    pub e2: Tensor,
    pub re1: Tensor,
    pub re2: Tensor,
    /// Guarded `ψ_b(re2)`.
    pub scale: Tensor,
}

#[derive(Clone, Debug)]
pub struct ErmOutput {
    pub rv: Tensor,
    /// Boundary logits `[B, 1, H, W]`.
    pub e: Tensor,
    pub state: CouplingState,
}

/// Edge reconstruction module.
#[derive(Clone, Debug)]
pub struct Erm {
    pub psi_a: Psi,
    pub psi_b: Psi,
    pub head: Conv2d,
    pub guard: DivisionGuard,
}

fn half_channels(v: &Tensor) -> Result<usize> {
    if v.rank() != 4 || v.shape()[1] % 2 != 0 {
        return Err(CmbError::shape(format!(
            "coupling needs [B, even C, H, W], got {:?}",
            v.shape()
        )));
    }
    Ok(v.shape()[1] / 2)
}

impl Erm {
    pub fn new(name: &str, channels: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(CmbError::shape(format!("coupling width {channels} is odd")));
        }
        let half = channels / 2;
        Ok(Erm {
            psi_a: Psi::new(&format!("{name}.psi_a"), half, depth, rng)?,
            psi_b: Psi::new(&format!("{name}.psi_b"), half, depth, rng)?,
            head: Conv2d::conv1x1(&format!("{name}.head"), channels, 1, Init::He, rng)?,
            guard: DivisionGuard::default(),
        })
    }

    pub fn forward(&self, v: &Tensor, ctx: &Ctx) -> Result<ErmOutput> {
        let half = half_channels(v)?;
        let mut parts = v.split(1, &[half, half])?;
        let e2 = parts.pop().expect("two halves");
        let e1 = parts.pop().expect("two halves");
        let re2 = e2.add(&self.psi_a.forward(&e1, ctx)?)?;
        let scale = self.guard.apply(self.psi_b.forward(&re2, ctx)?)?;
        let re1 = e1.mul(&scale)?.add(&scale)?;
        let rv = Tensor::concat(&[re1.clone(), re2.clone()], 1)?;
        let e = self.head.forward(&rv)?;
        Ok(ErmOutput {
            rv,
            e,
            state: CouplingState {
                e1,
                e2,
                re1,
                re2,
                scale,
            },
        })
    }

    /// Recovers `V` from `rV` with the same ψ parameters and mode.
    pub fn invert(&self, rv: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let half = half_channels(rv)?;
        let mut parts = rv.split(1, &[half, half])?;
        let re2 = parts.pop().expect("two halves");
        let re1 = parts.pop().expect("two halves");
        let scale = self.guard.apply(self.psi_b.forward(&re2, ctx)?)?;
        let e1 = re1.sub(&scale)?.div(&scale)?;
        let e2 = re2.sub(&self.psi_a.forward(&e1, ctx)?)?;
        Tensor::concat(&[e1, e2], 1)
    }
}

impl Module for Erm {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.psi_a.params();
        v.extend(self.psi_b.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.psi_a.params_mut();
        v.extend(self.psi_b.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn norms(&self) -> Vec<NormRef<'_>> {
        let mut v = self.psi_a.norms();
        v.extend(self.psi_b.norms());
        v
    }
}

/// Edge-guided residual module.
#[derive(Clone, Debug)]
pub struct Egrm {
    pub psi_c: Psi,
    pub psi_d: Psi,
    pub psi_e: Psi,
    pub head: Conv2d,
}

impl Egrm {
    pub fn new(name: &str, channels: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Egrm {
            psi_c: Psi::new(&format!("{name}.psi_c"), channels, depth, rng)?,
            psi_d: Psi::new(&format!("{name}.psi_d"), channels, depth, rng)?,
            psi_e: Psi::new(&format!("{name}.psi_e"), channels, depth, rng)?,
            head: Conv2d::conv1x1(&format!("{name}.head"), channels, 1, Init::He, rng)?,
        })
    }

    /// Returns `(m_i, M_i)`; `e` is `[B, 1, H, W]` and broadcasts over channels.
    pub fn forward(&self, u: &Tensor, e: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let (us, es) = (u.shape(), e.shape());
        if es.len() != 4 || us.len() != 4 || es[1] != 1 || es[0] != us[0] || es[2..] != us[2..] {
            return Err(CmbError::shape(format!(
                "edge map {es:?} does not match features {us:?}"
            )));
        }
        let inner = self.psi_d.forward(&self.psi_e.forward(u, ctx)?, ctx)?;
        let ur = self.psi_c.forward(&u.add(&inner)?, ctx)?;
        let m = ur.mul(&e.sigmoid())?.add(&ur)?;
        let mask = self.head.forward(&m)?;
        Ok((m, mask))
    }
}

impl Module for Egrm {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.psi_c.params();
        v.extend(self.psi_d.params());
        v.extend(self.psi_e.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.psi_c.params_mut();
        v.extend(self.psi_d.params_mut());
        v.extend(self.psi_e.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn norms(&self) -> Vec<NormRef<'_>> {
        let mut v = self.psi_c.norms();
        v.extend(self.psi_d.norms());
        v.extend(self.psi_e.norms());
        v
    }
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// Boundary logits; absent in the baseline decoder.
    pub e: Option<Tensor>,
    /// Mask logits `[B, 1, H, W]`.
    pub m: Tensor,
    pub carry: Tensor,
}

#[derive(Clone, Debug)]
enum BlockKind {
    Red {
        fuse_u: Conv2d,
        fuse_v: Conv2d,
        erm: Erm,
        egrm: Egrm,
    },
    Plain {
        fuse: Conv2d,
        psi: Psi,
        head: Conv2d,
    },
}

/// One decoder stage pairing the incoming features with a skip level.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    kind: BlockKind,
}

impl DecoderBlock {
    pub fn red(name: &str, channels: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(DecoderBlock {
            kind: BlockKind::Red {
                fuse_u: Conv2d::conv1x1(&format!("{name}.fuse_u"), 2 * channels, channels, Init::He, rng)?,
                fuse_v: Conv2d::conv1x1(&format!("{name}.fuse_v"), 2 * channels, channels, Init::He, rng)?,
                erm: Erm::new(&format!("{name}.erm"), channels, depth, rng)?,
                egrm: Egrm::new(&format!("{name}.egrm"), channels, depth, rng)?,
            },
        })
    }

    /// Baseline stage: `concat -> conv1x1 -> ψ -> mask head`.
    pub fn plain(name: &str, channels: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(DecoderBlock {
            kind: BlockKind::Plain {
                fuse: Conv2d::conv1x1(&format!("{name}.fuse"), 2 * channels, channels, Init::He, rng)?,
                psi: Psi::new(&format!("{name}.psi"), channels, depth, rng)?,
                head: Conv2d::conv1x1(&format!("{name}.head"), channels, 1, Init::He, rng)?,
            },
        })
    }

    pub fn erm(&self) -> Option<&Erm> {
        match &self.kind {
            BlockKind::Red { erm, .. } => Some(erm),
            BlockKind::Plain { .. } => None,
        }
    }

    pub fn erm_mut(&mut self) -> Option<&mut Erm> {
        match &mut self.kind {
            BlockKind::Red { erm, .. } => Some(erm),
            BlockKind::Plain { .. } => None,
        }
    }

    pub fn forward(&self, x: &Tensor, skip: &Tensor, ctx: &Ctx) -> Result<BlockOutput> {
        if x.shape() != skip.shape() {
            return Err(CmbError::shape(format!(
                "decoder input {:?} does not match skip {:?}",
                x.shape(),
                skip.shape()
            )));
        }
        let joined = Tensor::concat(&[x.clone(), skip.clone()], 1)?;
        match &self.kind {
            BlockKind::Red {
                fuse_u,
                fuse_v,
                erm,
                egrm,
            } => {
                let u = fuse_u.forward(&joined)?;
                let v = fuse_v.forward(&joined)?;
                let edge = erm.forward(&v, ctx)?;
                let (carry, m) = egrm.forward(&u, &edge.e, ctx)?;
                Ok(BlockOutput {
                    e: Some(edge.e),
                    m,
                    carry,
                })
            }
            BlockKind::Plain { fuse, psi, head } => {
                let carry = psi.forward(&fuse.forward(&joined)?, ctx)?;
                let m = head.forward(&carry)?;
                Ok(BlockOutput { e: None, m, carry })
            }
        }
    }
}

impl Module for DecoderBlock {
    fn params(&self) -> Vec<&Parameter> {
        match &self.kind {
            BlockKind::Red {
                fuse_u,
                fuse_v,
                erm,
                egrm,
            } => {
                let mut v = fuse_u.params();
                v.extend(fuse_v.params());
                v.extend(erm.params());
                v.extend(egrm.params());
                v
            }
            BlockKind::Plain { fuse, psi, head } => {
                let mut v = fuse.params();
                v.extend(psi.params());
                v.extend(head.params());
                v
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match &mut self.kind {
            BlockKind::Red {
                fuse_u,
                fuse_v,
                erm,
                egrm,
            } => {
                let mut v = fuse_u.params_mut();
                v.extend(fuse_v.params_mut());
                v.extend(erm.params_mut());
                v.extend(egrm.params_mut());
                v
            }
            BlockKind::Plain { fuse, psi, head } => {
                let mut v = fuse.params_mut();
                v.extend(psi.params_mut());
                v.extend(head.params_mut());
                v
            }
        }
    }

    fn norms(&self) -> Vec<NormRef<'_>> {
        match &self.kind {
            BlockKind::Red { erm, egrm, .. } => {
                let mut v = erm.norms();
                v.extend(egrm.norms());
                v
            }
            BlockKind::Plain { psi, .. } => psi.norms(),
        }
    }
}

/// `conv1x1 -> batchnorm -> relu` down to the decoder width.
#[derive(Clone, Debug)]
pub struct Compress {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Compress {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Compress {
            conv: Conv2d::conv1x1(&format!("{name}.conv"), cin, cout, Init::He, rng)?,
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, ctx)?.relu())
    }
}

impl Module for Compress {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.conv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }

    fn norms(&self) -> Vec<NormRef<'_>> {
        self.bn.norms()
    }
}

/// Four blocks, coarse to fine: DB4 pairs `O` with `L4`, then each block
/// upsamples the previous carry x2 and pairs it with the next finer level.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<DecoderBlock>,
}

impl Decoder {
    pub fn new(channels: usize, depth: usize, edge: bool, rng: &mut impl Rng) -> Result<Self> {
        let blocks = (1..=4)
            .rev()
            .map(|i| {
                let name = format!("red.db{i}");
                if edge {
                    DecoderBlock::red(&name, channels, depth, rng)
                } else {
                    DecoderBlock::plain(&name, channels, depth, rng)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Decoder { blocks })
    }

    /// `levels` are the compressed `L1..L4`; outputs are ordered DB4..DB1.
    pub fn decode(&self, o: &Tensor, levels: &[Tensor; 4], ctx: &Ctx) -> Result<Vec<BlockOutput>> {
        let mut outs: Vec<BlockOutput> = Vec::with_capacity(4);
        let mut x = o.clone();
        for (block, skip) in self.blocks.iter().zip(levels.iter().rev()) {
            if let Some(prev) = outs.last() {
                x = prev.carry.upsample_nearest(2)?;
            }
            outs.push(block.forward(&x, skip, ctx)?);
        }
        Ok(outs)
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<&Parameter> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    fn norms(&self) -> Vec<NormRef<'_>> {
        self.blocks.iter().flat_map(|b| b.norms()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_vec, init_rng};
    use crate::oracle::{egrm_loop, Mat, StageWeights, Vol};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(gaussian_vec(&mut init_rng(seed), n, 1.0), shape).unwrap()
    }

    /// Makes every stage of ψ output the constant `value`.
    fn force_constant(psi: &mut Psi, value: f64) {
        let last = psi.stages.last_mut().unwrap();
        let c = last.bn.gamma.tensor.numel();
        last.bn.gamma.set_data(vec![0.0; c]).unwrap();
        last.bn.beta.set_data(vec![value; c]).unwrap();
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn coupling_with_unit_psi() {
        let mut erm = Erm::new("erm", 4, 2, &mut init_rng(1)).unwrap();
        force_constant(&mut erm.psi_a, 1.0);
        force_constant(&mut erm.psi_b, 1.0);
        let v = random(&[2, 4, 3, 3], 2);
        let ctx = Ctx::eval();
        let out = erm.forward(&v, &ctx).unwrap();
        let shifted = v.affine(1.0, 1.0);
        assert_eq!(out.rv.data(), shifted.data());
        assert!(max_abs_diff(&erm.invert(&out.rv, &ctx).unwrap(), &v) <= 1e-15);
    }

    #[test]
    fn round_trip_random_psi() {
        for seed in 0..5 {
            let erm = Erm::new("erm", 8, 2, &mut init_rng(seed)).unwrap();
            let v = random(&[1, 8, 4, 4], 100 + seed);
            let ctx = Ctx::eval();
            let rv = erm.forward(&v, &ctx).unwrap().rv;
            assert!(max_abs_diff(&erm.invert(&rv, &ctx).unwrap(), &v) < 1e-5);
        }
    }

    #[test]
    fn zeroed_scale_is_singular_in_strict_mode() {
        let mut erm = Erm::new("erm", 4, 2, &mut init_rng(3)).unwrap();
        force_constant(&mut erm.psi_b, 0.0);
        let v = random(&[1, 4, 2, 2], 4);
        let ctx = Ctx::eval();
        let clamped = erm.forward(&v, &ctx).unwrap();
        assert!(clamped.rv.is_finite());
        assert!(clamped.state.scale.data().iter().all(|&s| s == EPS_DIV));
        assert!(max_abs_diff(&erm.invert(&clamped.rv, &ctx).unwrap(), &v) < 1e-9);

        erm.guard = DivisionGuard::Strict(EPS_DIV);
        match erm.forward(&v, &ctx) {
            Err(CmbError::Singularity { position, value, .. }) => {
                assert_eq!(position, [0, 0, 0, 0]);
                assert_eq!(value, 0.0);
            }
            other => panic!("expected singularity, got {other:?}"),
        }
        assert!(matches!(
            erm.invert(&clamped.rv, &ctx),
            Err(CmbError::Singularity { .. })
        ));
    }

    #[test]
    fn odd_width_rejected() {
        assert!(Erm::new("erm", 3, 1, &mut init_rng(0)).is_err());
        let erm = Erm::new("erm", 4, 1, &mut init_rng(0)).unwrap();
        assert!(matches!(
            erm.forward(&random(&[1, 3, 2, 2], 0), &Ctx::eval()),
            Err(CmbError::Shape(_))
        ));
    }

    #[test]
    fn egrm_gate_limits() {
        let egrm = Egrm::new("egrm", 3, 2, &mut init_rng(5)).unwrap();
        let u = random(&[1, 3, 4, 4], 6);
        let ctx = Ctx::eval();
        let (lo, _) = egrm.forward(&u, &Tensor::full(&[1, 1, 4, 4], -800.0), &ctx).unwrap();
        let (hi, _) = egrm.forward(&u, &Tensor::full(&[1, 1, 4, 4], 800.0), &ctx).unwrap();
        for (a, b) in lo.data().iter().zip(hi.data()) {
            assert_eq!(2.0 * a, *b);
        }
        assert!(egrm.forward(&u, &Tensor::zeros(&[1, 1, 2, 2]), &ctx).is_err());
    }

    fn stage_weights(psi: &Psi) -> Vec<StageWeights> {
        psi.stages
            .iter()
            .map(|s| StageWeights {
                w: s.conv.weight.data().to_vec(),
                b: s.conv.bias.as_ref().unwrap().data().to_vec(),
                gamma: s.bn.gamma.data().to_vec(),
                beta: s.bn.beta.data().to_vec(),
            })
            .collect()
    }

    fn vol(t: &Tensor) -> Vol {
        let s = t.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        (0..c)
            .map(|ch| {
                (0..h)
                    .map(|y| t.data()[(ch * h + y) * w..(ch * h + y + 1) * w].to_vec())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn egrm_matches_loop_oracle() {
        let mut rng = init_rng(21);
        let mut egrm = Egrm::new("egrm", 3, 2, &mut rng).unwrap();
        for psi in [&mut egrm.psi_c, &mut egrm.psi_d, &mut egrm.psi_e] {
            for s in &mut psi.stages {
                let c = s.bn.beta.tensor.numel();
                s.bn.beta.set_data(gaussian_vec(&mut rng, c, 0.5)).unwrap();
                s.conv.bias.as_mut().unwrap().set_data(gaussian_vec(&mut rng, c, 0.2)).unwrap();
            }
        }
        let u = random(&[1, 3, 5, 4], 22);
        let e = random(&[1, 1, 5, 4], 23);
        let (m, mask) = egrm.forward(&u, &e, &Ctx::train(0)).unwrap();
        let e_mat: Mat = vol(&e).remove(0);
        let head_b = egrm.head.bias.as_ref().unwrap().data()[0];
        let (m_ref, mask_ref) = egrm_loop(
            &vol(&u),
            &e_mat,
            &stage_weights(&egrm.psi_c),
            &stage_weights(&egrm.psi_d),
            &stage_weights(&egrm.psi_e),
            egrm.head.weight.data(),
            head_b,
            crate::nn::BN_EPS,
        );
        for (a, b) in m.data().iter().zip(m_ref.iter().flatten().flatten()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (a, b) in mask.data().iter().zip(mask_ref.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_grids_and_finiteness() {
        let mut rng = init_rng(7);
        let dec = Decoder::new(4, 1, true, &mut rng).unwrap();
        let levels = [32, 16, 8, 4].map(|g| random(&[2, 4, g, g], g as u64));
        let o = random(&[2, 4, 4, 4], 99);
        let outs = dec.decode(&o, &levels, &Ctx::train(1)).unwrap();
        let grids: Vec<usize> = outs.iter().map(|b| b.m.shape()[2]).collect();
        assert_eq!(grids, vec![4, 8, 16, 32]);
        for b in &outs {
            assert!(b.m.is_finite() && b.e.as_ref().unwrap().is_finite());
            assert_eq!(b.e.as_ref().unwrap().shape(), b.m.shape());
        }
        dec.check_registry().unwrap();

        let plain = Decoder::new(4, 1, false, &mut rng).unwrap();
        let outs = plain.decode(&o, &levels, &Ctx::eval()).unwrap();
        assert!(outs.iter().all(|b| b.e.is_none()));
    }
}
