//! The assembled network, gated by the ablation setting.

use rand::Rng;

use crate::config::{Ablation, RunConfig};
use crate::error::{CmbError, Result};
use crate::features::{FeaturePyramid, L5Fuser, StubEncoder};
use crate::itcam::{AmbiguityResult, Itcam};
use crate::itim::Itim;
use crate::nn::{init_rng, Ctx, Init, Module, NormRef};
use crate::red::{BlockOutput, Compress, Decoder};
use crate::tensor::{Parameter, Tensor};

#[derive(Debug)]
pub struct Forward {
    pub pyramid: FeaturePyramid,
    /// `O`, or `L5` when interaction is disabled.
    pub fused: Tensor,
    /// DB4..DB1.
    pub outputs: Vec<BlockOutput>,
    /// One gate result per image; `None` unless the ablation includes ITCAM.
    pub gates: Option<Vec<AmbiguityResult>>,
}

impl Forward {
    /// Finest mask logits `M_1`.
    pub fn mask_logits(&self) -> &Tensor {
        &self.outputs.last().expect("four blocks").m
    }

    pub fn ambiguity(&self) -> Option<Vec<f64>> {
        self.gates.as_ref().map(|g| g.iter().map(|r| r.a).collect())
    }
}

#[derive(Clone, Debug)]
pub struct CmbNet {
    pub ablation: Ablation,
    encoder: StubEncoder,
    fuser: L5Fuser,
    itcam: Option<Itcam>,
    itim: Option<Itim>,
    compress: Vec<Compress>,
    compress_o: Compress,
    pub decoder: Decoder,
}

impl CmbNet {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(cfg.seed);
        CmbNet::with_rng(cfg, &mut rng)
    }

    pub fn with_rng(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Self> {
        let ab = cfg.ablation;
        let encoder = StubEncoder::new(cfg.channels, Init::He, rng)?;
        let fuser = L5Fuser::new(cfg.channels, cfg.c5, Init::He, rng)?;
        let itcam = if ab.uses_itcam() {
            Some(Itcam::new(cfg.c5, cfg.n_tokens, cfg.d_c, cfg.d_z, cfg.k, rng)?)
        } else {
            None
        };
        let itim = if ab.uses_itim() {
            Some(Itim::new(cfg.c5, cfg.d_text, rng)?)
        } else {
            None
        };
        let dc = cfg.decoder_channels;
        let compress = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Compress::new(&format!("compress.l{}", i + 1), c, dc, rng))
            .collect::<Result<_>>()?;
        let compress_o = Compress::new("compress.o", cfg.c5, dc, rng)?;
        let decoder = Decoder::new(dc, cfg.psi_depth, ab.uses_red(), rng)?;
        let net = CmbNet {
            ablation: ab,
            encoder,
            fuser,
            itcam,
            itim,
            compress,
            compress_o,
            decoder,
        };
        net.check_registry()?;
        Ok(net)
    }

    /// Whether the forward pass computes (and therefore can read) ambiguity.
    pub fn reads_ambiguity(&self) -> bool {
        self.itcam.is_some()
    }

    pub fn uses_text(&self) -> bool {
        self.itim.is_some()
    }

    pub fn itcam(&self) -> Option<&Itcam> {
        self.itcam.as_ref()
    }

    pub fn itim(&self) -> Option<&Itim> {
        self.itim.as_ref()
    }

    /// `images` is `[B, 3, H, W]`; `text` is `[B, N, D_text]` and may be
    /// omitted for ablations that ignore it.
    pub fn forward(&self, images: &Tensor, text: Option<&Tensor>, ctx: &mut Ctx) -> Result<Forward> {
        let [l1, l2, l3, l4] = self.encoder.forward(images)?;
        let l5 = self.fuser.forward(&l2, &l3, &l4, ctx)?;
        let pyramid = FeaturePyramid::new([l1, l2, l3, l4], l5)?;
        let b = images.shape()[0];
        let (fused, gates) = match &self.itim {
            None => (pyramid.l5.clone(), None),
            Some(itim) => {
                let text = text.ok_or_else(|| {
                    CmbError::Argument(format!("ablation {} needs text features", self.ablation))
                })?;
                let ts = text.shape();
                if ts.len() != 3 || ts[0] != b {
                    return Err(CmbError::shape(format!(
                        "text must be [{b}, N, D], got {ts:?}"
                    )));
                }
                let l5s = pyramid.l5.shape().to_vec();
                let mut outs = Vec::with_capacity(b);
                let mut gates = self.itcam.as_ref().map(|_| Vec::with_capacity(b));
                for i in 0..b {
                    let t = text.narrow(0, i, 1)?.reshape(&ts[1..])?;
                    let x = pyramid.l5.narrow(0, i, 1)?.reshape(&l5s[1..])?;
                    let t_in = match (&self.itcam, gates.as_mut()) {
                        (Some(itcam), Some(g)) => {
                            let r = itcam.forward(&t, &x, ctx)?;
                            let t_a = r.t_a.clone();
                            g.push(r);
                            t_a
                        }
                        _ => t,
                    };
                    outs.push(itim.forward(&x, &t_in)?.reshape(&[1, l5s[1], l5s[2], l5s[3]])?);
                }
                (Tensor::concat(&outs, 0)?, gates)
            }
        };
        let o = self.compress_o.forward(&fused, ctx)?;
        let levels: Vec<Tensor> = self
            .compress
            .iter()
            .zip(&pyramid.levels)
            .map(|(c, l)| c.forward(l, ctx))
            .collect::<Result<_>>()?;
        let levels: [Tensor; 4] = levels.try_into().expect("four levels");
        let outputs = self.decoder.decode(&o, &levels, ctx)?;
        Ok(Forward {
            pyramid,
            fused,
            outputs,
            gates,
        })
    }
}

impl Module for CmbNet {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.encoder.params();
        v.extend(self.fuser.params());
        if let Some(m) = &self.itcam {
            v.extend(m.params());
        }
        if let Some(m) = &self.itim {
            v.extend(m.params());
        }
        for c in &self.compress {
            v.extend(c.params());
        }
        v.extend(self.compress_o.params());
        v.extend(self.decoder.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.encoder.params_mut();
        v.extend(self.fuser.params_mut());
        if let Some(m) = &mut self.itcam {
            v.extend(m.params_mut());
        }
        if let Some(m) = &mut self.itim {
            v.extend(m.params_mut());
        }
        for c in &mut self.compress {
            v.extend(c.params_mut());
        }
        v.extend(self.compress_o.params_mut());
        v.extend(self.decoder.params_mut());
        v
    }

    fn norms(&self) -> Vec<NormRef<'_>> {
        let mut v = self.fuser.norms();
        for c in &self.compress {
            v.extend(c.norms());
        }
        v.extend(self.compress_o.norms());
        v.extend(self.decoder.norms());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian_vec;

    fn tiny(ab: Ablation) -> RunConfig {
        RunConfig {
            ablation: ab,
            channels: [4, 4, 6, 6],
            c5: 6,
            d_c: 8,
            d_z: 4,
            d_text: 5,
            n_tokens: 4,
            decoder_channels: 4,
            psi_depth: 1,
            image_size: 32,
            ..RunConfig::default()
        }
    }

    fn inputs(b: usize) -> (Tensor, Tensor) {
        let mut rng = init_rng(77);
        let img = Tensor::new(gaussian_vec(&mut rng, b * 3 * 32 * 32, 0.5), &[b, 3, 32, 32]).unwrap();
        let txt = Tensor::new(gaussian_vec(&mut rng, b * 4 * 5, 1.0), &[b, 4, 5]).unwrap();
        (img, txt)
    }

    #[test]
    fn ablations_gate_construction() {
        let (img, txt) = inputs(2);
        for ab in Ablation::ALL {
            let net = CmbNet::new(&tiny(ab)).unwrap();
            assert_eq!(net.reads_ambiguity(), ab == Ablation::Full);
            assert_eq!(net.uses_text(), ab.uses_itim());
            let f = net.forward(&img, Some(&txt), &mut Ctx::train(1)).unwrap();
            assert_eq!(f.gates.is_some(), ab == Ablation::Full);
            let grids: Vec<usize> = f.outputs.iter().map(|o| o.m.shape()[2]).collect();
            assert_eq!(grids, vec![2, 4, 8, 16]);
            assert!(f.outputs.iter().all(|o| o.e.is_some() == ab.uses_red()));
            assert!(f.mask_logits().is_finite());
            if let Some(a) = f.ambiguity() {
                assert!(a.iter().all(|&a| (0.5..1.0).contains(&a)));
            }
        }
    }

    #[test]
    fn text_required_only_with_interaction() {
        let (img, _) = inputs(1);
        let base = CmbNet::new(&tiny(Ablation::BaseRed)).unwrap();
        assert!(base.forward(&img, None, &mut Ctx::eval()).is_ok());
        let full = CmbNet::new(&tiny(Ablation::Full)).unwrap();
        assert!(full.forward(&img, None, &mut Ctx::eval()).is_err());
    }

    #[test]
    fn every_output_receives_gradient() {
        let (img, txt) = inputs(2);
        let net = CmbNet::new(&tiny(Ablation::Full)).unwrap();
        let f = net.forward(&img, Some(&txt), &mut Ctx::train(3)).unwrap();
        let mut total = Tensor::scalar(0.0);
        for o in &f.outputs {
            total = total.add(&o.m.square().sum()).unwrap();
            total = total.add(&o.e.as_ref().unwrap().square().sum()).unwrap();
        }
        total.backward();
        let dead: Vec<&str> = net
            .params()
            .iter()
            .filter(|p| p.tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)))
            .map(|p| p.name.as_str())
            .collect();
        // The interaction value paths start at zero, which blocks gradient
        // to the attention maps, the scales and the gate until they move.
        let allowed = |n: &str| n.starts_with("itim.") || n.starts_with("itcam.");
        assert!(dead.iter().all(|n| allowed(n)), "{dead:?}");
    }
}
