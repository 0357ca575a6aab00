//! Parameterized layers shared by every network stage.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CmbError, Result};
use crate::tensor::{BatchNormStats, Parameter, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Per-forward state: train/eval switch and the generator for latent noise.
pub struct Ctx {
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn train(seed: u64) -> Self {
        Ctx {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval() -> Self {
        Ctx {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

/// A named batch-norm buffer set.
pub struct NormRef<'a> {
    pub name: &'a str,
    pub stats: &'a BatchNormStats,
}

pub trait Module {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;
    fn norms(&self) -> Vec<NormRef<'_>> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Fails if two parameters share a name.
    fn check_registry(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in self.params() {
            if !seen.insert(p.name.as_str()) {
                return Err(CmbError::Validation(format!(
                    "duplicate parameter name {}",
                    p.name
                )));
            }
        }
        Ok(())
    }

    fn zero_grad(&self) {
        for p in self.params() {
            p.tensor.zero_grad();
        }
    }
}

pub(crate) fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal weights, zero bias.
    He,
    Zero,
}

/// 2-D convolution layer with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let n = cout * fan_in;
        let data = match init {
            Init::He => gaussian_vec(rng, n, (2.0 / fan_in as f64).sqrt()),
            Init::Zero => vec![0.0; n],
        };
        Ok(Conv2d {
            weight: Parameter::new(format!("{name}.weight"), data, &[cout, cin, kernel, kernel])?,
            bias: if bias {
                Some(Parameter::new(format!("{name}.bias"), vec![0.0; cout], &[cout])?)
            } else {
                None
            },
            stride,
            pad: kernel / 2,
        })
    }

    pub fn conv1x1(name: &str, cin: usize, cout: usize, init: Init, rng: &mut impl Rng) -> Result<Self> {
        Conv2d::new(name, cin, cout, 1, 1, true, init, rng)
    }

    pub fn conv3x3(
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Conv2d::new(name, cin, cout, 3, stride, true, Init::He, rng)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(
            &self.weight.tensor,
            self.bias.as_ref().map(|b| &b.tensor),
            self.stride,
            self.pad,
        )
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Parameter> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Parameter,
    pub beta: Parameter,
    pub stats: BatchNormStats,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            name: name.to_string(),
            gamma: Parameter::new(format!("{name}.gamma"), vec![1.0; channels], &[channels])?,
            beta: Parameter::new(format!("{name}.beta"), vec![0.0; channels], &[channels])?,
            stats: BatchNormStats::new(channels),
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        x.batch_norm(
            &self.gamma.tensor,
            &self.beta.tensor,
            &self.stats,
            ctx.training,
            BN_MOMENTUM,
            BN_EPS,
        )
    }
}

impl Module for BatchNorm2d {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn norms(&self) -> Vec<NormRef<'_>> {
        vec![NormRef {
            name: &self.name,
            stats: &self.stats,
        }]
    }
}

/// Affine map over the last axis of a 2-D input: `x ⊗ W + b`, with `W` stored
/// as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, din: usize, dout: usize, init: Init, rng: &mut impl Rng) -> Result<Self> {
        let data = match init {
            Init::He => gaussian_vec(rng, din * dout, (1.0 / din as f64).sqrt()),
            Init::Zero => vec![0.0; din * dout],
        };
        Ok(Linear {
            weight: Parameter::new(format!("{name}.weight"), data, &[din, dout])?,
            bias: Parameter::new(format!("{name}.bias"), vec![0.0; dout], &[1, dout])?,
        })
    }

    /// Small-scale normal weights.
    pub fn with_std(name: &str, din: usize, dout: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: Parameter::new(format!("{name}.weight"), gaussian_vec(rng, din * dout, std), &[din, dout])?,
            bias: Parameter::new(format!("{name}.bias"), vec![0.0; dout], &[1, dout])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.tensor)?.add(&self.bias.tensor)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// `conv3x3 -> relu -> batchnorm`.
#[derive(Clone, Debug)]
pub struct ConvReluBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvReluBn {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(ConvReluBn {
            conv: Conv2d::conv3x3(&format!("{name}.conv"), cin, cout, 1, rng)?,
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?.relu(), ctx)
    }
}

impl Module for ConvReluBn {
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

/// Chain of [`ConvReluBn`] stages at constant width (the ψ mapping).
#[derive(Clone, Debug)]
pub struct Psi {
    pub stages: Vec<ConvReluBn>,
}

impl Psi {
    pub fn new(name: &str, channels: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        let stages = (0..depth)
            .map(|i| ConvReluBn::new(&format!("{name}.{i}"), channels, channels, rng))
            .collect::<Result<_>>()?;
        Ok(Psi { stages })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut h = x.clone();
        for s in &self.stages {
            h = s.forward(&h, ctx)?;
        }
        Ok(h)
    }
}

impl Module for Psi {
    fn params(&self) -> Vec<&Parameter> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.stages.iter_mut().flat_map(|s| s.params_mut()).collect()
    }

    fn norms(&self) -> Vec<NormRef<'_>> {
        self.stages.iter().flat_map(|s| s.norms()).collect()
    }
}

/// Deterministic generator for weight initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
