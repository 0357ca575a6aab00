//! Invariant checks shared by `cmb verify` and the acceptance tests.
//!
//! Every check compares the tensor path against an independent reference
//! from [`crate::oracle`] or a closed-form property and reports one
//! [`CheckResult`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, RunConfig};
use crate::error::{CmbError, Result};
use crate::imageio::Mask;
use crate::itcam::{autocorrelate, knn_neighbors, symmetric_kl, GaussianLatent, Itcam};
use crate::itim::Itim;
use crate::losses::total_loss;
use crate::model::CmbNet;
use crate::nn::{gaussian_vec, Ctx, Module};
use crate::oracle::{fd_coordinate, knn_exhaustive, mc_kl, rel_err};
use crate::red::Erm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

/// One line of the machine-readable report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    pub metric: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckResult {
    /// Passes when `metric <= tolerance` (and the metric is finite).
    pub fn at_most(name: &str, metric: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            status: if metric.is_finite() && metric <= tolerance {
                Status::Pass
            } else {
                Status::Fail
            },
            metric,
            tolerance,
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Gradcheck,
    Invertibility,
    Knn,
    Kl,
    Properties,
}

impl FromStr for Suite {
    type Err = CmbError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "all" => Suite::All,
            "gradcheck" => Suite::Gradcheck,
            "invertibility" => Suite::Invertibility,
            "knn" => Suite::Knn,
            "kl" => Suite::Kl,
            "properties" => Suite::Properties,
            other => return Err(CmbError::Argument(format!("unknown suite {other:?}"))),
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Suite::All => "all",
            Suite::Gradcheck => "gradcheck",
            Suite::Invertibility => "invertibility",
            Suite::Knn => "knn",
            Suite::Kl => "kl",
            Suite::Properties => "properties",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Perturb ψ between the coupling's forward and inverse passes.
    pub tamper_psi: bool,
}

/// Runs the registered checks of a suite, in a fixed order.
pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let want = |s: Suite| suite == Suite::All || suite == s;
    let mut out = Vec::new();
    if want(Suite::Invertibility) {
        out.push(invertibility(100, 8, 8, opts.tamper_psi, 0)?);
    }
    if want(Suite::Gradcheck) {
        out.push(gradcheck_network(&GradcheckSpec::default())?);
    }
    if want(Suite::Knn) {
        out.push(knn_equivalence(200, 0)?);
    }
    if want(Suite::Kl) {
        out.push(kl_monte_carlo(50, 200_000, 0)?);
    }
    if want(Suite::Properties) {
        out.push(softmax_rows(100, 0)?);
        out.push(concat_split_identity(100, 0)?);
        out.push(pyramid_shapes()?);
        out.push(ambiguity_bounds(1000, 0)?);
        out.push(ambiguity_identical_heads(20, 0)?);
        out.push(itim_residual_identity(100, 0)?);
    }
    Ok(out)
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(gaussian_vec(rng, n, std), shape).expect("positive shape")
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Round trip of the coupling over random inputs and random ψ weights
/// (batch-norm affine terms randomized too) at `C x H x H`.
pub fn invertibility(cases: usize, channels: usize, size: usize, tamper: bool, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A7E);
    let mut worst: f64 = 0.0;
    let ctx = Ctx::eval();
    for _ in 0..cases {
        let depth = rng.random_range(1..=3);
        let mut erm = Erm::new("erm", channels, depth, &mut rng)?;
        randomize_affine(&mut erm, &mut rng)?;
        let v = random_tensor(&mut rng, &[1, channels, size, size], 1.0);
        let rv = erm.forward(&v, &ctx)?.rv;
        if tamper {
            for p in erm.psi_a.params_mut() {
                let d: Vec<f64> = p.data().iter().map(|x| x + 0.5).collect();
                p.set_data(d)?;
            }
        }
        worst = worst.max(max_abs(&erm.invert(&rv, &ctx)?, &v));
    }
    let name = if tamper {
        "invertibility.tampered_psi"
    } else {
        "invertibility.round_trip"
    };
    Ok(CheckResult::at_most(name, worst, 1e-5).with_detail(format!("{cases} cases at {channels}x{size}x{size}")))
}

fn randomize_affine(m: &mut impl Module, rng: &mut impl Rng) -> Result<()> {
    for p in m.params_mut() {
        if p.name.ends_with(".beta") || p.name.ends_with(".gamma") || p.name.ends_with(".bias") {
            let d: Vec<f64> = p.data().iter().map(|x| x + 0.3 * rng.random_range(-1.0..1.0)).collect();
            p.set_data(d)?;
        }
    }
    for n in m.norms() {
        let (mean, var) = n.stats.snapshot();
        let mean = mean.iter().map(|_| rng.random_range(-0.5..0.5)).collect();
        let var = var.iter().map(|_| rng.random_range(0.5..2.0)).collect();
        n.stats.set(mean, var);
    }
    Ok(())
}

/// Exact neighbour-set match against exhaustive search for
/// `k ∈ {1, 5, 10, C-1}` (values below `C` only). A quarter of the maps
/// contain duplicated rows to exercise the tie-break.
pub fn knn_equivalence(maps: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4B4E);
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    for i in 0..maps {
        let c = rng.random_range(2..=32);
        let len = rng.random_range(1..=16);
        let mut data = gaussian_vec(&mut rng, c * len, 1.0);
        if i % 4 == 0 && c > 2 {
            let (src, dst) = (rng.random_range(0..c), rng.random_range(0..c));
            let row: Vec<f64> = data[src * len..(src + 1) * len].to_vec();
            data[dst * len..(dst + 1) * len].copy_from_slice(&row);
        }
        let s = autocorrelate(&Tensor::new(data, &[c, len])?)?;
        let rows: Vec<Vec<f64>> = s.s.data().chunks(c).map(|r| r.to_vec()).collect();
        let mut ks = vec![1, 5, 10, c - 1];
        ks.retain(|&k| k >= 1 && k < c);
        ks.dedup();
        for k in ks {
            let got = knn_neighbors(&s, k)?.index;
            let want = knn_exhaustive(&rows, k);
            compared += 1;
            let same = got.iter().zip(&want).all(|(a, b)| {
                let (mut a, mut b) = (a.clone(), b.clone());
                a.sort_unstable();
                b.sort_unstable();
                a == b
            });
            if !same {
                mismatches += 1;
            }
        }
    }
    Ok(CheckResult::at_most("knn.oracle_equivalence", mismatches as f64, 0.0)
        .with_detail(format!("{compared} (map, k) pairs")))
}

fn latent(mu: Vec<f64>, sigma: Vec<f64>) -> Result<GaussianLatent> {
    let n = mu.len();
    Ok(GaussianLatent {
        z: Tensor::new(mu.clone(), &[n])?,
        mu: Tensor::new(mu, &[n])?,
        sigma: Tensor::new(sigma, &[n])?,
        eps: vec![0.0; n],
    })
}

/// Closed-form symmetric KL against a Monte Carlo estimate; the metric is the
/// worst deviation in standard errors.
pub fn kl_monte_carlo(pairs: usize, samples: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0C1);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let d = rng.random_range(1..=16);
        let draw = |rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
            let mu = gaussian_vec(rng, d, 1.0);
            let sigma = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
            (mu, sigma)
        };
        let (mp, sp) = draw(&mut rng);
        let (mq, sq) = draw(&mut rng);
        let (kl_pq, kl_qp) = symmetric_kl(&latent(mp.clone(), sp.clone())?, &latent(mq.clone(), sq.clone())?)?;
        let (e1, se1) = mc_kl(&mp, &sp, &mq, &sq, samples, &mut rng);
        let (e2, se2) = mc_kl(&mq, &sq, &mp, &sp, samples, &mut rng);
        let z = (kl_pq.item() + kl_qp.item() - e1 - e2).abs() / (se1 * se1 + se2 * se2).sqrt();
        worst = worst.max(z);
    }
    Ok(CheckResult::at_most("kl.monte_carlo", worst, 3.0)
        .with_detail(format!("{pairs} pairs, {samples} samples per direction; metric in standard errors")))
}

pub fn softmax_rows(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x50F7);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (r, c) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let scale = rng.random_range(0.1..50.0);
        let s = random_tensor(&mut rng, &[r, c], scale).softmax(1)?;
        for row in s.data().chunks(c) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(CheckResult::at_most("properties.softmax_rows", worst, 1e-10))
}

pub fn concat_split_identity(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0CA);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=4)];
        let axis = rng.random_range(0..3);
        let t = random_tensor(&mut rng, &shape, 1.0);
        let cut = rng.random_range(0..shape[axis]);
        let sizes: Vec<usize> = if cut == 0 { vec![shape[axis]] } else { vec![cut, shape[axis] - cut] };
        let back = Tensor::concat(&t.split(axis, &sizes)?, axis)?;
        worst = worst.max(if back.shape() == t.shape() { max_abs(&back, &t) } else { f64::INFINITY });
    }
    Ok(CheckResult::at_most("properties.concat_split_identity", worst, 0.0))
}

pub fn pyramid_shapes() -> Result<CheckResult> {
    let mut bad = 0usize;
    for size in [32, 64, 96] {
        for ab in Ablation::ALL {
            let cfg = RunConfig {
                ablation: ab,
                channels: [4, 4, 6, 6],
                c5: 6,
                d_c: 8,
                d_z: 4,
                d_text: 5,
                n_tokens: 3,
                decoder_channels: 4,
                psi_depth: 1,
                image_size: size,
                ..RunConfig::default()
            };
            let net = CmbNet::new(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
            let img = random_tensor(&mut rng, &[1, 3, size, size], 0.5);
            let txt = random_tensor(&mut rng, &[1, 3, 5], 1.0);
            let f = net.forward(&img, Some(&txt), &mut Ctx::train(0))?;
            let grids: Vec<usize> = f.outputs.iter().map(|o| o.m.shape()[2]).collect();
            let want: Vec<usize> = [16, 8, 4, 2].iter().map(|d| size / d).collect();
            let level_ok = f.pyramid.levels.iter().enumerate().all(|(i, l)| l.shape()[2] == size >> (i + 1));
            if grids != want || !level_ok || f.fused.shape() != f.pyramid.l5.shape() {
                bad += 1;
            }
        }
    }
    Ok(CheckResult::at_most("properties.pyramid_shapes", bad as f64, 0.0))
}

/// `a ∈ [0.5, 1)` for random weights, scales and inputs. The metric counts
/// violations.
pub fn ambiguity_bounds(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA4B);
    let mut bad = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..cases {
        let c = rng.random_range(2..=8);
        let n = rng.random_range(2..=6);
        let d = rng.random_range(1..=8);
        let k = rng.random_range(1..=10);
        let itcam = Itcam::new(c, n, rng.random_range(1..=6), rng.random_range(1..=4), k, &mut rng)?;
        let scale = 10f64.powf(rng.random_range(-2.0..3.0));
        let l5 = random_tensor(&mut rng, &[c, 2, 2], scale);
        let t = random_tensor(&mut rng, &[n, d], scale);
        let train = rng.random_bool(0.5);
        let mut ctx = if train { Ctx::train(rng.random()) } else { Ctx::eval() };
        let a = itcam.forward(&t, &l5, &mut ctx)?.a;
        lo = lo.min(a);
        hi = hi.max(a);
        if !(0.5..1.0).contains(&a) {
            bad += 1;
        }
    }
    Ok(CheckResult::at_most("properties.ambiguity_bounds", bad as f64, 0.0)
        .with_detail(format!("{cases} inputs, observed a in [{lo}, {hi}]")))
}

/// With one shared head and identical central features, `a` is exactly 0.5.
pub fn ambiguity_identical_heads(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1D);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let c = rng.random_range(2..=8);
        let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let itcam = Itcam::shared(c, 6, 3, rng.random_range(1..=10), &mut rng)?;
        let l5 = random_tensor(&mut rng, &[c, h, w], 1.0);
        let t = l5.reshape(&[c, h * w])?;
        let a = itcam.forward(&t, &l5, &mut Ctx::eval())?.a;
        worst = worst.max((a - 0.5).abs());
    }
    Ok(CheckResult::at_most("properties.ambiguity_identical_heads", worst, 0.0))
}

/// `‖O - L5‖∞` with zero-initialized value paths.
pub fn itim_residual_identity(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x171);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let c = rng.random_range(1..=8);
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=6);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let mut itim = Itim::new(c, d, &mut rng)?;
        itim.w1.set_data(vec![rng.random_range(-2.0..2.0)])?;
        itim.w2.set_data(vec![rng.random_range(-2.0..2.0)])?;
        let l5 = random_tensor(&mut rng, &[c, h, w], 2.0);
        let t = random_tensor(&mut rng, &[n, d], 2.0);
        let o = itim.forward(&l5, &t)?;
        worst = worst.max(if o.shape() == l5.shape() { max_abs(&o, &l5) } else { f64::INFINITY });
    }
    Ok(CheckResult::at_most("properties.itim_residual_identity", worst, 1e-12))
}

/// Settings of the end-to-end finite-difference check.
#[derive(Clone, Debug)]
pub struct GradcheckSpec {
    pub image_size: usize,
    pub batch: usize,
    pub tokens: usize,
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            image_size: 32,
            batch: 2,
            tokens: 4,
            coordinates: 500,
            step: 1e-6,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

/// Analytic vs central-difference gradients of the total loss of the full
/// network with respect to sampled parameter coordinates. Every weight is
/// first perturbed away from its initialization so zero-initialized paths
/// carry gradient; the latent noise is frozen by reseeding each pass.
pub fn gradcheck_network(spec: &GradcheckSpec) -> Result<CheckResult> {
    let cfg = RunConfig {
        ablation: Ablation::Full,
        channels: [4, 4, 6, 6],
        c5: 6,
        d_c: 6,
        d_z: 4,
        d_text: 5,
        n_tokens: spec.tokens,
        decoder_channels: 4,
        psi_depth: 1,
        image_size: spec.image_size,
        k: 3,
        seed: spec.seed,
        ..RunConfig::default()
    };
    let mut net = CmbNet::new(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6C);
    for p in net.params_mut() {
        let d: Vec<f64> = p.data().iter().map(|x| x + 0.2 * rng.random_range(-1.0..1.0)).collect();
        p.set_data(d)?;
    }
    let s = spec.image_size;
    let images = random_tensor(&mut rng, &[spec.batch, 3, s, s], 0.5);
    let text = random_tensor(&mut rng, &[spec.batch, spec.tokens, cfg.d_text], 1.0);
    let masks: Vec<Mask> = (0..spec.batch)
        .map(|_| {
            let y0 = rng.random_range(0..s / 2);
            let x0 = rng.random_range(0..s / 2);
            let mut m = Mask::zeros(s, s);
            for y in y0..y0 + s / 3 {
                for x in x0..x0 + s / 4 {
                    m.data[y * s + x] = 1.0;
                }
            }
            m
        })
        .collect();
    let noise_seed = spec.seed ^ 0xE5;
    let loss_of = |net: &CmbNet| -> Result<Tensor> {
        let f = net.forward(&images, Some(&text), &mut Ctx::train(noise_seed))?;
        Ok(total_loss(&f.outputs, &masks)?.total)
    };

    net.zero_grad();
    loss_of(&net)?.backward();
    let analytic: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| p.tensor.grad().unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
        .collect();

    let n_params = analytic.len();
    let per_tensor = spec.coordinates.div_ceil(n_params);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (pi, g) in analytic.iter().enumerate() {
        for _ in 0..per_tensor.min(g.len()) {
            picks.push((pi, rng.random_range(0..g.len())));
        }
    }
    while picks.len() < spec.coordinates {
        let pi = rng.random_range(0..n_params);
        picks.push((pi, rng.random_range(0..analytic[pi].len())));
    }

    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for &(pi, j) in &picks {
        let mut values = net.params()[pi].data().to_vec();
        let mut failure = None;
        let mut f = |x: &[f64]| -> f64 {
            let mut params = net.params_mut();
            if let Err(e) = params[pi].set_data(x.to_vec()) {
                failure = Some(e);
                return f64::NAN;
            }
            match loss_of(&net) {
                Ok(l) => l.item(),
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        };
        let numeric = fd_coordinate(&mut f, &mut values, j, spec.step);
        if let Some(e) = failure {
            return Err(e);
        }
        net.params_mut()[pi].set_data(values)?;
        let err = rel_err(analytic[pi][j], numeric?);
        if err > worst {
            worst = err;
            worst_at = format!("{}[{j}]", net.params()[pi].name);
        }
    }
    Ok(CheckResult::at_most("gradcheck.full_network", worst, spec.tolerance).with_detail(format!(
        "{} coordinates over {n_params} tensors, {}x3x{s}x{s} input, N={}; worst at {worst_at}",
        picks.len(),
        spec.batch,
        spec.tokens
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in ["all", "gradcheck", "invertibility", "knn", "kl", "properties"] {
            assert_eq!(s.parse::<Suite>().unwrap().to_string(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn tampering_is_caught() {
        let ok = invertibility(3, 4, 4, false, 1).unwrap();
        let bad = invertibility(3, 4, 4, true, 1).unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert!(!bad.passed(), "{bad:?}");
    }

    #[test]
    fn small_checks_pass() {
        assert!(knn_equivalence(20, 3).unwrap().passed());
        assert!(softmax_rows(10, 1).unwrap().passed());
        assert!(concat_split_identity(20, 1).unwrap().passed());
        assert!(ambiguity_bounds(50, 1).unwrap().passed());
        assert!(ambiguity_identical_heads(5, 1).unwrap().passed());
        assert!(itim_residual_identity(10, 1).unwrap().passed());
    }

    #[test]
    fn report_serializes_one_object_per_check() {
        let r = CheckResult::at_most("x", 0.5, 1.0);
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(line, r#"{"name":"x","status":"pass","metric":0.5,"tolerance":1.0}"#);
    }
}
