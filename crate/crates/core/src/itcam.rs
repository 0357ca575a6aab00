//! Image-text ambiguity gate.
//!
//! Both modalities go through the same pipeline: an autocorrelation map of
//! the (channel-major) features, a k-nearest-neighbour graph over its rows,
//! a difference-weighted neighbourhood map squeezed to a central feature by
//! a 1x1 projection and global max pooling, and a diagonal Gaussian head.
//! The symmetric KL between the image and text latents gives the ambiguity
//! `a = sigmoid(mean KL)`, and the text is rescaled by `1 - a`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CmbError, Result};
use crate::nn::{Ctx, Init, Linear, Module};
use crate::tensor::{Parameter, Tensor};

pub const SIGMA_FLOOR: f64 = 1e-6;

/// Largest `f64` strictly below one; `a` never rounds up to 1.
const A_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// `S = softmax_rows(X) ⊗ Xᵀ` with its source shape.
#[derive(Clone, Debug)]
pub struct AutocorrelationMap {
    pub s: Tensor,
    /// `(C, HW)` of the input.
    pub source: (usize, usize),
}

pub fn autocorrelate(x: &Tensor) -> Result<AutocorrelationMap> {
    if x.rank() != 2 {
        return Err(CmbError::shape(format!(
            "autocorrelate needs [C, HW], got {:?}",
            x.shape()
        )));
    }
    let s = x.softmax(1)?.matmul(&x.transpose()?)?;
    Ok(AutocorrelationMap {
        s,
        source: (x.shape()[0], x.shape()[1]),
    })
}

/// For each row `n`, its `k` nearest other rows and their distances.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub k: usize,
    pub index: Vec<Vec<usize>>,
    pub dist: Vec<Vec<f64>>,
}

impl Neighbors {
    fn flat_index(&self) -> Vec<usize> {
        self.index.iter().flatten().copied().collect()
    }
}

/// Euclidean k-nearest rows of `S`, self excluded, ties to the lower index.
pub fn knn_neighbors(s: &AutocorrelationMap, k: usize) -> Result<Neighbors> {
    knn_rows(&s.s, k)
}

pub(crate) fn knn_rows(s: &Tensor, k: usize) -> Result<Neighbors> {
    if s.rank() != 2 {
        return Err(CmbError::shape(format!("knn needs a matrix, got {:?}", s.shape())));
    }
    let (rows, cols) = (s.shape()[0], s.shape()[1]);
    if k == 0 || k >= rows {
        return Err(CmbError::Argument(format!(
            "k = {k} outside 1..={} for {rows} rows",
            rows.saturating_sub(1)
        )));
    }
    let data = s.data();
    let row = |i: usize| &data[i * cols..(i + 1) * cols];
    let mut index = Vec::with_capacity(rows);
    let mut dist = Vec::with_capacity(rows);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(rows - 1);
    for n in 0..rows {
        cand.clear();
        for m in (0..rows).filter(|&m| m != n) {
            let d2: f64 = row(n).iter().zip(row(m)).map(|(a, b)| (a - b) * (a - b)).sum();
            cand.push((d2.sqrt(), m));
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, order);
            cand.truncate(k);
        }
        cand.sort_unstable_by(order);
        index.push(cand.iter().map(|c| c.1).collect());
        dist.push(cand.iter().map(|c| c.0).collect());
    }
    Ok(Neighbors { k, index, dist })
}

/// Global-max-pooled neighbourhood descriptor.
#[derive(Clone, Debug)]
pub struct CentralFeature {
    pub c: Tensor,
    pub k: usize,
}

/// Forms `p_n^j = cat(s_n - d_n^j, d_n^j)` for every row and neighbour,
/// projects each with the 1x1 map, and max-pools over all positions.
pub fn central_feature(s: &AutocorrelationMap, nb: &Neighbors, proj: &Linear) -> Result<CentralFeature> {
    let rows = s.s.shape()[0];
    if nb.index.len() != rows {
        return Err(CmbError::shape(format!(
            "neighbour table has {} rows, map has {rows}",
            nb.index.len()
        )));
    }
    let centers: Vec<usize> = (0..rows).flat_map(|n| std::iter::repeat_n(n, nb.k)).collect();
    let rep = s.s.gather_rows(&centers)?;
    let neigh = s.s.gather_rows(&nb.flat_index())?;
    let p = Tensor::concat(&[rep.sub(&neigh)?, neigh], 1)?;
    let c = proj.forward(&p)?.max_axis(0)?;
    Ok(CentralFeature { c, k: nb.k })
}

/// `N(mu, sigma)` with a reparameterized draw `z = mu + sigma * eps`.
#[derive(Clone, Debug)]
pub struct GaussianLatent {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub z: Tensor,
    pub eps: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mu: Linear,
    pub sigma: Linear,
}

impl GaussianHead {
    pub fn new(name: &str, d_c: usize, d_z: usize, init: Init, rng: &mut impl Rng) -> Result<Self> {
        let make = |suffix: &str, rng: &mut _| match init {
            Init::He => Linear::with_std(&format!("{name}.{suffix}"), d_c, d_z, 0.1 / (d_c as f64).sqrt(), rng),
            Init::Zero => Linear::new(&format!("{name}.{suffix}"), d_c, d_z, Init::Zero, rng),
        };
        Ok(GaussianHead {
            mu: make("mu", rng)?,
            sigma: make("sigma", rng)?,
        })
    }

    /// Noise is drawn from `ctx.rng` in training mode and is zero in eval.
    pub fn forward(&self, c: &CentralFeature, ctx: &mut Ctx) -> Result<GaussianLatent> {
        let d_c = c.c.numel();
        let row = c.c.reshape(&[1, d_c])?;
        let mu = self.mu.forward(&row)?.reshape(&[self.dim()])?;
        let sigma = self
            .sigma
            .forward(&row)?
            .softplus()
            .affine(1.0, SIGMA_FLOOR)
            .reshape(&[self.dim()])?;
        let eps: Vec<f64> = if ctx.training {
            (0..self.dim())
                .map(|_| StandardNormal.sample(&mut ctx.rng))
                .collect()
        } else {
            vec![0.0; self.dim()]
        };
        let noise = Tensor::new(eps.clone(), &[self.dim()])?;
        let z = mu.add(&sigma.mul(&noise)?)?;
        Ok(GaussianLatent { mu, sigma, z, eps })
    }

    pub fn dim(&self) -> usize {
        self.mu.weight.shape()[1]
    }
}

impl Module for GaussianHead {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.mu.params();
        v.extend(self.sigma.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.mu.params_mut();
        v.extend(self.sigma.params_mut());
        v
    }
}

/// Closed-form `KL(p || q)` for diagonal Gaussians.
pub fn kl_diag(p: &GaussianLatent, q: &GaussianLatent) -> Result<Tensor> {
    if p.mu.shape() != q.mu.shape() {
        return Err(CmbError::shape(format!(
            "latent widths differ: {:?} vs {:?}",
            p.mu.shape(),
            q.mu.shape()
        )));
    }
    if let Some(bad) = p.sigma.data().iter().chain(q.sigma.data()).find(|&&s| s <= 0.0) {
        return Err(CmbError::Validation(format!("non-positive sigma {bad}")));
    }
    let log_ratio = q.sigma.log().sub(&p.sigma.log())?;
    let num = p.sigma.square().add(&p.mu.sub(&q.mu)?.square())?;
    let den = q.sigma.square().scale(2.0);
    Ok(log_ratio.add(&num.div(&den)?)?.affine(1.0, -0.5).sum())
}

/// `(KL(g_v || g_t), KL(g_t || g_v))`.
pub fn symmetric_kl(gv: &GaussianLatent, gt: &GaussianLatent) -> Result<(Tensor, Tensor)> {
    Ok((kl_diag(gv, gt)?, kl_diag(gt, gv)?))
}

#[derive(Clone, Debug)]
pub struct AmbiguityResult {
    /// Ambiguity in `[0.5, 1)`.
    pub a: f64,
    /// `1 - a` as a differentiable scalar.
    pub keep: Tensor,
    pub t_a: Tensor,
    pub kl_vt: Tensor,
    pub kl_tv: Tensor,
    pub image_latent: GaussianLatent,
    pub text_latent: GaussianLatent,
    pub image_central: CentralFeature,
    pub text_central: CentralFeature,
}

/// Ambiguity from the two KL terms; returns `(a, 1 - a)`.
pub fn ambiguity(kl_vt: &Tensor, kl_tv: &Tensor) -> Result<(f64, Tensor)> {
    let mean = kl_vt.add(kl_tv)?.scale(0.5);
    let a = mean.sigmoid().item().min(A_MAX);
    // 1 - sigmoid(x) = sigmoid(-x) keeps precision when the KL is large
    Ok((a, mean.neg().sigmoid()))
}

/// Which parameters the text path uses.
#[derive(Clone, Debug)]
enum TextPath {
    Own { proj: Linear, head: GaussianHead },
    /// Reuses the image projection and head (requires `N == C`).
    Shared,
}

#[derive(Clone, Debug)]
pub struct Itcam {
    pub k: usize,
    image_proj: Linear,
    image_head: GaussianHead,
    text: TextPath,
}

impl Itcam {
    pub fn new(
        c5: usize,
        tokens: usize,
        d_c: usize,
        d_z: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Itcam {
            k,
            image_proj: Linear::new("itcam.image.proj", 2 * c5, d_c, Init::He, rng)?,
            image_head: GaussianHead::new("itcam.image.head", d_c, d_z, Init::He, rng)?,
            text: TextPath::Own {
                proj: Linear::new("itcam.text.proj", 2 * tokens, d_c, Init::He, rng)?,
                head: GaussianHead::new("itcam.text.head", d_c, d_z, Init::He, rng)?,
            },
        })
    }

    /// Both modalities share one projection and one Gaussian head.
    pub fn shared(c5: usize, d_c: usize, d_z: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Itcam {
            k,
            image_proj: Linear::new("itcam.image.proj", 2 * c5, d_c, Init::He, rng)?,
            image_head: GaussianHead::new("itcam.image.head", d_c, d_z, Init::He, rng)?,
            text: TextPath::Shared,
        })
    }

    /// Central feature of a channel-major `[rows, len]` feature matrix.
    pub fn central(&self, x: &Tensor, proj: &Linear) -> Result<CentralFeature> {
        let s = autocorrelate(x)?;
        let rows = s.source.0;
        if rows < 2 {
            return Err(CmbError::Argument(format!(
                "central feature needs at least 2 rows, got {rows}"
            )));
        }
        let nb = knn_neighbors(&s, self.k.min(rows - 1))?;
        central_feature(&s, &nb, proj)
    }

    /// Gates text `[N, D]` against one image's `L5` (`[C, H, W]`).
    pub fn forward(&self, t: &Tensor, l5: &Tensor, ctx: &mut Ctx) -> Result<AmbiguityResult> {
        if l5.rank() != 3 || t.rank() != 2 {
            return Err(CmbError::shape(format!(
                "itcam needs L5 [C,H,W] and T [N,D], got {:?} and {:?}",
                l5.shape(),
                t.shape()
            )));
        }
        let (c, h, w) = (l5.shape()[0], l5.shape()[1], l5.shape()[2]);
        let x = l5.reshape(&[c, h * w])?;
        let image_central = self.central(&x, &self.image_proj)?;
        let image_latent = self.image_head.forward(&image_central, ctx)?;
        let (proj, head) = match &self.text {
            TextPath::Own { proj, head } => (proj, head),
            TextPath::Shared => (&self.image_proj, &self.image_head),
        };
        let text_central = self.central(t, proj)?;
        let text_latent = head.forward(&text_central, ctx)?;
        let (kl_vt, kl_tv) = symmetric_kl(&image_latent, &text_latent)?;
        let (a, keep) = ambiguity(&kl_vt, &kl_tv)?;
        let t_a = t.mul(&keep)?;
        Ok(AmbiguityResult {
            a,
            keep,
            t_a,
            kl_vt,
            kl_tv,
            image_latent,
            text_latent,
            image_central,
            text_central,
        })
    }
}

impl Module for Itcam {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.image_proj.params();
        v.extend(self.image_head.params());
        if let TextPath::Own { proj, head } = &self.text {
            v.extend(proj.params());
            v.extend(head.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.image_proj.params_mut();
        v.extend(self.image_head.params_mut());
        if let TextPath::Own { proj, head } = &mut self.text {
            v.extend(proj.params_mut());
            v.extend(head.params_mut());
        }
        v
    }
}
