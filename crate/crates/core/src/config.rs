//! Run configuration: plain-text `key = value` files with flag overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CmbError, Result};

/// Which modules are constructed, mirroring the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Plain residual decoder, no text.
    Base,
    /// Edge decoder, no text.
    BaseRed,
    /// Edge decoder plus image-text interaction on ungated text.
    BaseRedItim,
    /// Everything, text gated by ambiguity.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Base,
        Ablation::BaseRed,
        Ablation::BaseRedItim,
        Ablation::Full,
    ];

    pub fn uses_red(self) -> bool {
        self != Ablation::Base
    }

    pub fn uses_itim(self) -> bool {
        matches!(self, Ablation::BaseRedItim | Ablation::Full)
    }

    pub fn uses_itcam(self) -> bool {
        self == Ablation::Full
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Base => "B",
            Ablation::BaseRed => "B+RED",
            Ablation::BaseRedItim => "B+RED+ITIM",
            Ablation::Full => "FULL",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = CmbError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "B" | "BASE" => Ok(Ablation::Base),
            "B+RED" => Ok(Ablation::BaseRed),
            "B+RED+ITIM" => Ok(Ablation::BaseRedItim),
            "FULL" | "B+RED+ITIM+ITCAM" => Ok(Ablation::Full),
            other => Err(CmbError::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub ablation: Ablation,
    /// Neighbour count for central features; clamped to `rows - 1`.
    pub k: usize,
    pub d_text: usize,
    pub n_tokens: usize,
    /// Latent width of the Gaussian heads.
    pub d_z: usize,
    /// Central feature width after the 1x1 projection.
    pub d_c: usize,
    /// Stub encoder widths for L1..L4.
    pub channels: [usize; 4],
    pub c5: usize,
    /// Width every level is compressed to before decoding.
    pub decoder_channels: usize,
    /// Number of conv3x3-relu-batchnorm stages in each ψ.
    pub psi_depth: usize,
    pub image_size: usize,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            ablation: Ablation::Full,
            k: 10,
            d_text: 32,
            n_tokens: 8,
            d_z: 16,
            d_c: 32,
            channels: [8, 16, 24, 32],
            c5: 32,
            decoder_channels: 16,
            psi_depth: 2,
            image_size: 64,
            seed: 1,
            epochs: 20,
            lr: 1e-3,
            batch: 8,
            threshold: 0.5,
        }
    }
}

impl RunConfig {
    /// Published widths: 768-d text features and a 64-channel decoder.
    pub fn paper_widths() -> Self {
        RunConfig {
            d_text: 768,
            decoder_channels: 64,
            ..RunConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| CmbError::Config(format!("bad value {v:?} for {key}")))
        }
        match key.trim() {
            "ablation" => self.ablation = value.parse()?,
            "k" => self.k = num(key, value)?,
            "d_text" => self.d_text = num(key, value)?,
            "n_tokens" => self.n_tokens = num(key, value)?,
            "d_z" => self.d_z = num(key, value)?,
            "d_c" => self.d_c = num(key, value)?,
            "channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num(key, p))
                    .collect::<Result<_>>()?;
                self.channels = parts
                    .try_into()
                    .map_err(|_| CmbError::Config("channels needs four values".into()))?;
            }
            "c5" => self.c5 = num(key, value)?,
            "decoder_channels" => self.decoder_channels = num(key, value)?,
            "psi_depth" => self.psi_depth = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            other => return Err(CmbError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CmbError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CmbError::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let c = self.channels;
        format!(
            "ablation = {}\nk = {}\nd_text = {}\nn_tokens = {}\nd_z = {}\nd_c = {}\n\
             channels = {},{},{},{}\nc5 = {}\ndecoder_channels = {}\npsi_depth = {}\n\
             image_size = {}\nseed = {}\nepochs = {}\nlr = {}\nbatch = {}\nthreshold = {}\n",
            self.ablation,
            self.k,
            self.d_text,
            self.n_tokens,
            self.d_z,
            self.d_c,
            c[0],
            c[1],
            c[2],
            c[3],
            self.c5,
            self.decoder_channels,
            self.psi_depth,
            self.image_size,
            self.seed,
            self.epochs,
            self.lr,
            self.batch,
            self.threshold
        )
    }

    /// Applies `CMB_SEED` from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("CMB_SEED") {
            self.set("seed", &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CmbError::Config(m.to_string()));
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return bad("image_size must be a positive multiple of 16");
        }
        if self.decoder_channels == 0 || self.decoder_channels % 2 != 0 {
            return bad("decoder_channels must be even and positive");
        }
        if self.channels.contains(&0) || self.c5 == 0 || self.d_text == 0 || self.d_z == 0 || self.d_c == 0 {
            return bad("widths must be positive");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.n_tokens < 2 {
            return bad("n_tokens must be at least 2");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if self.batch == 0 || self.psi_depth == 0 {
            return bad("batch and psi_depth must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        Ok(())
    }
}
