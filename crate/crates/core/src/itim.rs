//! Image-text interaction through a cross-modal correlation matrix.
//!
//! Works on one image at a time with `X = L5` flattened to `[C, HW]`.

use rand::Rng;

use crate::error::{CmbError, Result};
use crate::nn::{gaussian_vec, Init, Linear, Module};
use crate::tensor::{Parameter, Tensor};

/// 1x1 convolution on a `[C, HW]` matrix: `W ⊗ X + b` with `W` as `[out, in]`.
#[derive(Clone, Debug)]
pub struct ChannelMap {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl ChannelMap {
    pub fn new(name: &str, cin: usize, cout: usize, init: Init, rng: &mut impl Rng) -> Result<Self> {
        let data = match init {
            Init::He => gaussian_vec(rng, cin * cout, (1.0 / cin as f64).sqrt()),
            Init::Zero => vec![0.0; cin * cout],
        };
        Ok(ChannelMap {
            weight: Parameter::new(format!("{name}.weight"), data, &[cout, cin])?,
            bias: Parameter::new(format!("{name}.bias"), vec![0.0; cout], &[cout, 1])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[0] != self.weight.shape()[1] {
            return Err(CmbError::shape(format!(
                "channel map expects [{}, HW], got {:?}",
                self.weight.shape()[1],
                x.shape()
            )));
        }
        self.weight.tensor.matmul(x)?.add(&self.bias.tensor)
    }
}

impl Module for ChannelMap {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct InteractionState {
    /// `[HW, N]`, softmax over tokens.
    pub f_it: Tensor,
    /// `[HW, HW]`, softmax over positions.
    pub f_ir: Tensor,
    /// `F_ir ⊗ F_it`, `[HW, N]`.
    pub cs: Tensor,
    /// `L5` as `[C, HW]`.
    pub x: Tensor,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Itim {
    pub alpha: ChannelMap,
    pub beta: ChannelMap,
    pub gamma: ChannelMap,
    pub delta: Linear,
    pub theta: Linear,
    pub w1: Parameter,
    pub w2: Parameter,
}

impl Itim {
    /// γ and θ start at zero so the block is an identity at initialization.
    pub fn new(c: usize, d_text: usize, rng: &mut impl Rng) -> Result<Self> {
        Itim::with_value_init(c, d_text, Init::Zero, rng)
    }

    pub fn with_value_init(c: usize, d_text: usize, value: Init, rng: &mut impl Rng) -> Result<Self> {
        Ok(Itim {
            alpha: ChannelMap::new("itim.alpha", c, c, Init::He, rng)?,
            beta: ChannelMap::new("itim.beta", c, c, Init::He, rng)?,
            gamma: ChannelMap::new("itim.gamma", c, c, value, rng)?,
            delta: Linear::new("itim.delta", d_text, c, Init::He, rng)?,
            theta: Linear::new("itim.theta", d_text, c, value, rng)?,
            w1: Parameter::new("itim.w1", vec![0.0], &[1])?,
            w2: Parameter::new("itim.w2", vec![0.0], &[1])?,
        })
    }

    /// `L5` is `[C, H, W]`, `T_a` is `[N, D_text]`.
    pub fn cross_modal_attention(&self, l5: &Tensor, t_a: &Tensor) -> Result<InteractionState> {
        if l5.rank() != 3 || t_a.rank() != 2 {
            return Err(CmbError::shape(format!(
                "itim needs L5 [C,H,W] and T [N,D], got {:?} and {:?}",
                l5.shape(),
                t_a.shape()
            )));
        }
        if t_a.shape()[1] != self.delta.weight.shape()[0] {
            return Err(CmbError::shape(format!(
                "text width {} but projections expect {}",
                t_a.shape()[1],
                self.delta.weight.shape()[0]
            )));
        }
        let (c, h, w) = (l5.shape()[0], l5.shape()[1], l5.shape()[2]);
        let x = l5.reshape(&[c, h * w])?;
        let q = self.alpha.forward(&x)?.transpose()?;
        let f_it = q.matmul(&self.delta.forward(t_a)?.transpose()?)?.softmax(1)?;
        let f_ir = q.matmul(&self.beta.forward(&x)?)?.softmax(1)?;
        let cs = f_ir.matmul(&f_it)?;
        Ok(InteractionState {
            f_it,
            f_ir,
            cs,
            x,
            grid: (h, w),
        })
    }

    /// Returns `O` with the shape of `L5`.
    pub fn refine_and_fuse(&self, state: &InteractionState, t_a: &Tensor) -> Result<Tensor> {
        let rf_it = state.cs.mul(&self.w1.tensor)?.add(&state.f_it)?;
        let rf_ir = state
            .cs
            .matmul(&state.f_it.transpose()?)?
            .mul(&self.w2.tensor)?
            .add(&state.f_ir)?;
        let text = rf_it.matmul(&self.theta.forward(t_a)?)?;
        let image = rf_ir.matmul(&self.gamma.forward(&state.x)?.transpose()?)?;
        let o = text.add(&image)?.transpose()?.add(&state.x)?;
        let c = state.x.shape()[0];
        o.reshape(&[c, state.grid.0, state.grid.1])
    }

    pub fn forward(&self, l5: &Tensor, t_a: &Tensor) -> Result<Tensor> {
        let state = self.cross_modal_attention(l5, t_a)?;
        self.refine_and_fuse(&state, t_a)
    }
}

impl Module for Itim {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.alpha.params();
        v.extend(self.beta.params());
        v.extend(self.gamma.params());
        v.extend(self.delta.params());
        v.extend(self.theta.params());
        v.push(&self.w1);
        v.push(&self.w2);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.alpha.params_mut();
        v.extend(self.beta.params_mut());
        v.extend(self.gamma.params_mut());
        v.extend(self.delta.params_mut());
        v.extend(self.theta.params_mut());
        v.push(&mut self.w1);
        v.push(&mut self.w2);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_rng;
    use crate::oracle::{interaction_loop, InteractionWeights, Mat};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(gaussian_vec(&mut init_rng(seed), n, 1.0), shape).unwrap()
    }

    fn rows(t: &Tensor) -> Mat {
        let c = t.shape()[1];
        t.data().chunks(c).map(|r| r.to_vec()).collect()
    }

    #[test]
    fn zero_alpha_gives_uniform_correlation() {
        let mut itim = Itim::new(4, 5, &mut init_rng(1)).unwrap();
        itim.alpha.weight.set_data(vec![0.0; 16]).unwrap();
        let st = itim
            .cross_modal_attention(&random(&[4, 2, 3], 2), &random(&[3, 5], 3))
            .unwrap();
        for &v in st.cs.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for &v in st.f_ir.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_case_two_by_two() {
        // α(L5) = I, δ(T) = I, β(L5) = 0.
        let mut itim = Itim::new(2, 2, &mut init_rng(0)).unwrap();
        itim.alpha.weight.set_data(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        itim.beta.weight.set_data(vec![0.0; 4]).unwrap();
        itim.delta.weight.set_data(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 1, 2]).unwrap();
        let t = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let st = itim.cross_modal_attention(&eye, &t).unwrap();
        let hi = std::f64::consts::E / (1.0 + std::f64::consts::E);
        let lo = 1.0 - hi;
        let expect_it = [hi, lo, lo, hi];
        for (a, b) in st.f_it.data().iter().zip(expect_it) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(st.f_ir.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        for &v in st.cs.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_identity_and_zero_scales() {
        let itim = Itim::new(4, 6, &mut init_rng(4)).unwrap();
        let l5 = random(&[4, 3, 2], 5);
        let t = random(&[5, 6], 6);
        let st = itim.cross_modal_attention(&l5, &t).unwrap();
        let o = itim.refine_and_fuse(&st, &t).unwrap();
        assert_eq!(o.shape(), l5.shape());
        assert_eq!(o.data(), l5.data());
        for r in st.f_it.data().chunks(5).chain(st.f_ir.data().chunks(6)) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = init_rng(9);
        let mut itim = Itim::with_value_init(4, 5, Init::He, &mut rng).unwrap();
        itim.w1.set_data(vec![0.7]).unwrap();
        itim.w2.set_data(vec![-0.4]).unwrap();
        for m in [&mut itim.alpha, &mut itim.beta, &mut itim.gamma] {
            let n = m.bias.tensor.numel();
            m.bias.set_data(gaussian_vec(&mut rng, n, 0.3)).unwrap();
        }
        for m in [&mut itim.delta, &mut itim.theta] {
            let n = m.bias.tensor.numel();
            m.bias.set_data(gaussian_vec(&mut rng, n, 0.3)).unwrap();
        }
        let l5 = random(&[4, 2, 2], 10);
        let t = random(&[3, 5], 11);
        let o = itim.forward(&l5, &t).unwrap();
        let pair = |w: &Parameter, b: &Parameter| (w.data().to_vec(), b.data().to_vec());
        let a = pair(&itim.alpha.weight, &itim.alpha.bias);
        let b = pair(&itim.beta.weight, &itim.beta.bias);
        let g = pair(&itim.gamma.weight, &itim.gamma.bias);
        let d = pair(&itim.delta.weight, &itim.delta.bias);
        let th = pair(&itim.theta.weight, &itim.theta.bias);
        let weights = InteractionWeights {
            alpha: (&a.0, &a.1),
            beta: (&b.0, &b.1),
            gamma: (&g.0, &g.1),
            delta: (&d.0, &d.1),
            theta: (&th.0, &th.1),
            w1: 0.7,
            w2: -0.4,
        };
        let x = rows(&l5.reshape(&[4, 4]).unwrap());
        let expect = interaction_loop(&x, &rows(&t), &weights);
        for (got, want) in o.data().iter().zip(expect.iter().flatten()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn suppressed_text_contributes_nothing_through_theta() {
        let mut rng = init_rng(12);
        let mut itim = Itim::with_value_init(3, 4, Init::He, &mut rng).unwrap();
        itim.gamma.weight.set_data(vec![0.0; 9]).unwrap();
        let l5 = random(&[3, 2, 2], 13);
        let o = itim.forward(&l5, &Tensor::zeros(&[4, 4])).unwrap();
        assert_eq!(o.data(), l5.data());
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let itim = Itim::new(4, 6, &mut init_rng(0)).unwrap();
        let err = itim.forward(&random(&[4, 2, 2], 1), &random(&[3, 5], 2));
        assert!(matches!(err, Err(CmbError::Shape(_))));
    }
}
