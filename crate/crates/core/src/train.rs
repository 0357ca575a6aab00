//! Adam training loop, checkpoints and the per-epoch metrics log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{sample_rng, Dataset};
use crate::error::{CmbError, Result};
use crate::losses::total_loss;
use crate::metrics::evaluate;
use crate::model::CmbNet;
use crate::nn::{Ctx, Module};
use crate::tensor::{read_cmbt, write_cmbt, Tensor};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter adaptive moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, net: &impl Module) -> Self {
        let sizes: Vec<usize> = net.params().iter().map(|p| p.tensor.numel()).collect();
        Adam {
            lr,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update from the gradients currently stored on `net`.
    /// Parameters without gradient are treated as having zero gradient.
    pub fn apply(&mut self, net: &mut impl Module) -> Result<()> {
        self.step += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in net.params_mut().into_iter().enumerate() {
            let grad = p.tensor.grad();
            let mut data = p.data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                data[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: f64,
    pub val_iou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ambiguity_matched: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ambiguity_mismatched: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: CmbNet,
    pub log: Vec<EpochLog>,
    /// Mean loss of every optimization step, in order.
    pub step_losses: Vec<f64>,
}

/// Where training writes its artifacts; all optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    seed.wrapping_mul(0x100_0000_01B3) ^ ((epoch as u64) << 32) ^ step as u64
}

/// Trains a fresh network. Validation metrics come from `val`, or from the
/// last tenth of `train` when `val` is `None`.
pub fn train(cfg: &RunConfig, train_set: &Dataset, val: Option<&Dataset>, out: &TrainOutputs) -> Result<TrainOutcome> {
    let net = CmbNet::new(cfg)?;
    train_from(net, cfg, train_set, val, out)
}

pub fn train_from(
    mut net: CmbNet,
    cfg: &RunConfig,
    train_set: &Dataset,
    val: Option<&Dataset>,
    out: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CmbError::Argument("empty training set".into()));
    }
    let held_out;
    let (fit, val) = match val {
        Some(v) => (train_set.clone(), v),
        None => {
            let n_val = (train_set.len() / 10).max(1).min(train_set.len() - 1).max(0);
            if n_val == 0 {
                return Err(CmbError::Argument("need at least two samples without a validation set".into()));
            }
            let cut = train_set.len() - n_val;
            held_out = Dataset {
                samples: train_set.samples[cut..].to_vec(),
            };
            (
                Dataset {
                    samples: train_set.samples[..cut].to_vec(),
                },
                &held_out,
            )
        }
    };
    let mut log_file = match &out.metrics_log {
        Some(p) => Some(fs::File::create(p).map_err(|e| CmbError::io(p, e))?),
        None => None,
    };
    let mut adam = Adam::new(cfg.lr, &net);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut sample_rng(cfg.seed, 1_000_000 + epoch as u64));
        let mut sum = 0.0;
        let mut steps = 0usize;
        for (s, idx) in order.chunks(cfg.batch).enumerate() {
            let (img, txt, masks) = fit.batch(idx)?;
            let mut ctx = Ctx::train(step_seed(cfg.seed, epoch, s));
            net.zero_grad();
            let fwd = net.forward(&img, Some(&txt), &mut ctx)?;
            let report = total_loss(&fwd.outputs, &masks)?;
            let loss = report.value();
            if !loss.is_finite() {
                return diverged(&net, cfg, out, epoch, s, loss);
            }
            report.total.backward();
            let finite_grads = net
                .params()
                .iter()
                .all(|p| p.tensor.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
            if !finite_grads {
                return diverged(&net, cfg, out, epoch, s, f64::NAN);
            }
            adam.apply(&mut net)?;
            step_losses.push(loss);
            sum += loss;
            steps += 1;
        }
        let report = evaluate(&net, val, cfg.threshold, cfg.batch)?;
        let entry = EpochLog {
            epoch,
            loss: sum / steps as f64,
            val_f1: report.f1,
            val_iou: report.iou,
            val_ambiguity_matched: report.ambiguity_matched,
            val_ambiguity_mismatched: report.ambiguity_mismatched,
        };
        if let (Some(f), Some(p)) = (log_file.as_mut(), &out.metrics_log) {
            let line = serde_json::to_string(&entry).map_err(|e| CmbError::Validation(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| CmbError::io(p, e))?;
        }
        if out.verbose {
            eprintln!(
                "[{}] epoch {epoch}/{}: loss {:.4}, val F1 {:.4}, IoU {:.4} ({:.1}s)",
                cfg.ablation,
                cfg.epochs,
                entry.loss,
                entry.val_f1,
                entry.val_iou,
                started.elapsed().as_secs_f64()
            );
        }
        log.push(entry);
    }
    if let Some(dir) = &out.checkpoint {
        save_checkpoint(dir, cfg, &net)?;
    }
    Ok(TrainOutcome {
        net,
        log,
        step_losses,
    })
}

/// Updates only follow finite gradients, so the current parameters are the
/// last finite state unless they started non-finite.
fn diverged(net: &CmbNet, cfg: &RunConfig, out: &TrainOutputs, epoch: usize, step: usize, loss: f64) -> Result<TrainOutcome> {
    let finite = net.params().iter().all(|p| p.tensor.is_finite());
    if let (Some(dir), true) = (&out.checkpoint, finite) {
        save_checkpoint(dir, cfg, net)?;
    }
    Err(CmbError::Divergence { epoch, step, loss })
}

const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub params: Vec<CheckpointEntry>,
    pub norms: Vec<String>,
}

fn file_name(name: &str) -> String {
    name.replace('/', "_")
}

/// Directory with `config.txt`, one `CMBT` per parameter and per
/// batch-norm buffer, and `manifest.json`.
pub fn save_checkpoint(dir: impl AsRef<Path>, cfg: &RunConfig, net: &CmbNet) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params")).map_err(|e| CmbError::io(dir, e))?;
    fs::create_dir_all(dir.join("norms")).map_err(|e| CmbError::io(dir, e))?;
    let cfg_path = dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| CmbError::io(&cfg_path, e))?;
    let mut params = Vec::new();
    for p in net.params() {
        let file = format!("params/{}.cmbt", file_name(&p.name));
        write_cmbt(dir.join(&file), &p.tensor)?;
        params.push(CheckpointEntry {
            name: p.name.clone(),
            file,
            shape: p.shape().to_vec(),
        });
    }
    let mut norms = Vec::new();
    for n in net.norms() {
        let (mean, var) = n.stats.snapshot();
        let len = mean.len();
        let base = file_name(n.name);
        write_cmbt(dir.join(format!("norms/{base}.mean.cmbt")), &Tensor::new(mean, &[len])?)?;
        write_cmbt(dir.join(format!("norms/{base}.var.cmbt")), &Tensor::new(var, &[len])?)?;
        norms.push(n.name.to_string());
    }
    let manifest = CheckpointManifest { params, norms };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CmbError::Validation(e.to_string()))?;
    fs::write(&path, text).map_err(|e| CmbError::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(RunConfig, CmbNet)> {
    let dir = dir.as_ref();
    let cfg = RunConfig::load(dir.join("config.txt"))?;
    let mut net = CmbNet::new(&cfg)?;
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CmbError::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| CmbError::Validation(format!("{}: {e}", path.display())))?;
    let mut params = net.params_mut();
    if params.len() != manifest.params.len() {
        return Err(CmbError::Validation(format!(
            "checkpoint has {} parameters, network {}",
            manifest.params.len(),
            params.len()
        )));
    }
    for (p, e) in params.iter_mut().zip(&manifest.params) {
        if p.name != e.name {
            return Err(CmbError::Validation(format!("expected parameter {}, found {}", p.name, e.name)));
        }
        let t = read_cmbt(dir.join(&e.file))?;
        if t.shape() != p.shape() {
            return Err(CmbError::shape(format!("{}: {:?} vs {:?}", e.name, t.shape(), p.shape())));
        }
        p.set_data(t.to_vec())?;
    }
    for n in net.norms() {
        if !manifest.norms.iter().any(|m| m == n.name) {
            return Err(CmbError::Validation(format!("missing batch-norm stats {}", n.name)));
        }
        let base = file_name(n.name);
        let mean = read_cmbt(dir.join(format!("norms/{base}.mean.cmbt")))?;
        let var = read_cmbt(dir.join(format!("norms/{base}.var.cmbt")))?;
        n.stats.set(mean.to_vec(), var.to_vec());
    }
    Ok((cfg, net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;
    use crate::data::{gen_dataset, GenOptions};

    fn tiny(ab: Ablation, epochs: usize, lr: f64) -> RunConfig {
        RunConfig {
            ablation: ab,
            channels: [4, 4, 6, 6],
            c5: 6,
            d_c: 8,
            d_z: 4,
            d_text: 6,
            n_tokens: 3,
            decoder_channels: 4,
            psi_depth: 1,
            image_size: 32,
            epochs,
            lr,
            batch: 4,
            ..RunConfig::default()
        }
    }

    fn dataset(dir: &Path) -> Dataset {
        gen_dataset(
            dir,
            GenOptions {
                n: 8,
                seed: 5,
                size: 32,
                tokens: 3,
                width: 6,
            },
        )
        .unwrap();
        Dataset::load(dir).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = tiny(Ablation::Base, 1, 0.01);
        let mut net = CmbNet::new(&cfg).unwrap();
        let before: Vec<Vec<f64>> = net.params().iter().map(|p| p.data().to_vec()).collect();
        let loss = net.params().iter().map(|p| p.tensor.sum()).reduce(|a, b| a.add(&b).unwrap()).unwrap();
        loss.backward();
        let mut adam = Adam::new(0.01, &net);
        adam.apply(&mut net).unwrap();
        for (p, b) in net.params().iter().zip(before) {
            for (x, y) in p.data().iter().zip(b) {
                assert!((y - x - 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_lr_keeps_checkpoint_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(&dir.path().join("data"));
        let cfg = tiny(Ablation::Full, 1, 0.0);
        let fresh = CmbNet::new(&cfg).unwrap();
        let out = TrainOutputs {
            checkpoint: Some(dir.path().join("ckpt")),
            ..TrainOutputs::default()
        };
        train(&cfg, &data, None, &out).unwrap();
        let (cfg2, loaded) = load_checkpoint(dir.path().join("ckpt")).unwrap();
        assert_eq!(cfg2, cfg);
        for (a, b) in fresh.params().iter().zip(loaded.params()) {
            assert_eq!(a.data(), b.data(), "{}", a.name);
        }
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(dir.path());
        let cfg = tiny(Ablation::Full, 2, 1e-3);
        let a = train(&cfg, &data, None, &TrainOutputs::default()).unwrap();
        let b = train(&cfg, &data, None, &TrainOutputs::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.step_losses, b.step_losses);
        assert!(a.step_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn divergence_saves_last_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = dataset(&dir.path().join("data"));
        for s in &mut data.samples {
            let n = s.image.numel();
            s.image = Tensor::new(vec![f64::NAN; n], s.image.shape()).unwrap();
        }
        let cfg = tiny(Ablation::Base, 1, 1e-3);
        let fresh = CmbNet::new(&cfg).unwrap();
        let out = TrainOutputs {
            checkpoint: Some(dir.path().join("ckpt")),
            ..TrainOutputs::default()
        };
        let err = train(&cfg, &data, None, &out).unwrap_err();
        assert!(matches!(err, CmbError::Divergence { epoch: 1, step: 0, .. }));
        let (_, saved) = load_checkpoint(dir.path().join("ckpt")).unwrap();
        for (a, b) in fresh.params().iter().zip(saved.params()) {
            assert_eq!(a.data(), b.data());
        }
    }
}
