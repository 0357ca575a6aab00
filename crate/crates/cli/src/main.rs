use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cmb_core::config::{Ablation, RunConfig};
use cmb_core::data::{gen_dataset, Dataset, GenOptions};
use cmb_core::metrics::{evaluate, predict, write_probability};
use cmb_core::train::{load_checkpoint, train, TrainOutputs};
use cmb_core::verify::{run_suite, Suite, VerifyOptions};

#[derive(Parser)]
#[command(name = "cmb", version, about = "Train and verify the tamper localization network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Use the published 768-d text and 64-channel decoder widths.
    #[arg(long)]
    paper_widths: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None if self.paper_widths => RunConfig::paper_widths(),
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv:?} is not key=value"))?;
            cfg.set(k, v)?;
        }
        if let Some(a) = self.ablation {
            cfg.ablation = a;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(l) = self.lr {
            cfg.lr = l;
        }
        if let Some(b) = self.batch {
            cfg.batch = b;
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one configuration and save a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Validation set; defaults to the last tenth of the training data.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (JSON lines); defaults to `<out>/metrics.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also write per-image probability maps as PGM here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Print per-image scores.
        #[arg(long)]
        per_image: bool,
    },
    /// Run the invariant checks; exits nonzero if any fails.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        /// Perturb ψ between forward and inverse (negative control).
        #[arg(long)]
        tamper_psi: bool,
    },
    /// Train all four ablation rows and report held-out scores.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { out, n, size, cfg } => {
            let c = cfg.resolve()?;
            let opts = GenOptions {
                n,
                seed: c.seed,
                size: size.unwrap_or(c.image_size),
                tokens: c.n_tokens,
                width: c.d_text,
            };
            let entries = gen_dataset(&out, opts)?;
            let matched = entries.iter().filter(|e| e.matched).count();
            println!(
                "{}",
                serde_json::json!({"out": out, "n": entries.len(), "matched": matched, "seed": c.seed})
            );
        }
        Command::Train { data, val, out, log, cfg } => {
            let c = cfg.resolve()?;
            let train_set = load(&data)?;
            let val_set = val.as_deref().map(load).transpose()?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let outputs = TrainOutputs {
                checkpoint: Some(out.clone()),
                metrics_log: Some(log.unwrap_or_else(|| out.join("metrics.jsonl"))),
                verbose: true,
            };
            let result = train(&c, &train_set, val_set.as_ref(), &outputs)?;
            let last = result.log.last().context("no epochs were run")?;
            println!("{}", serde_json::to_string(last)?);
        }
        Command::Eval {
            checkpoint,
            data,
            threshold,
            predictions,
            per_image,
        } => {
            let (c, net) = load_checkpoint(&checkpoint)?;
            let ds = load(&data)?;
            let report = evaluate(&net, &ds, threshold, c.batch)?;
            if per_image {
                for s in &report.images {
                    println!("{}", serde_json::to_string(s)?);
                }
            }
            if let Some(dir) = predictions {
                std::fs::create_dir_all(&dir)?;
                let idx: Vec<usize> = (0..ds.len()).collect();
                for chunk in idx.chunks(c.batch) {
                    let (probs, _) = predict(&net, &ds, chunk)?;
                    for (p, &i) in probs.iter().zip(chunk) {
                        let s = &ds.samples[i];
                        write_probability(dir.join(format!("{}.pgm", s.id)), p, &s.mask)?;
                    }
                }
            }
            println!(
                "{}",
                serde_json::json!({
                    "ablation": c.ablation.label(),
                    "threshold": report.threshold,
                    "f1": report.f1,
                    "iou": report.iou,
                    "ambiguity_matched": report.ambiguity_matched,
                    "ambiguity_mismatched": report.ambiguity_mismatched,
                    "images": report.images.len(),
                })
            );
        }
        Command::Verify { suite, tamper_psi } => {
            let results = run_suite(suite, &VerifyOptions { tamper_psi })?;
            for r in &results {
                println!("{}", serde_json::to_string(r)?);
            }
            return Ok(results.iter().all(|r| r.passed()));
        }
        Command::Ablate { data, val, out, cfg } => {
            let base = cfg.resolve()?;
            let train_set = load(&data)?;
            let val_set = load(&val)?;
            for ab in Ablation::ALL {
                let c = RunConfig {
                    ablation: ab,
                    ..base.clone()
                };
                let dir = out.join(ab.label().replace('+', "_"));
                std::fs::create_dir_all(&dir)?;
                let outputs = TrainOutputs {
                    checkpoint: Some(dir.clone()),
                    metrics_log: Some(dir.join("metrics.jsonl")),
                    verbose: true,
                };
                let r = train(&c, &train_set, Some(&val_set), &outputs)?;
                let report = evaluate(&r.net, &val_set, c.threshold, c.batch)?;
                println!(
                    "{}",
                    serde_json::json!({"ablation": ab.label(), "f1": report.f1, "iou": report.iou})
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}
