//! Synthetic tampered-image datasets.
//!
//! Each sample is a textured background with one pasted region, either
//! spliced from a different texture or copied from elsewhere in the same
//! image, carrying a tone shift and a different noise level. Half of the
//! samples get text describing their own mask; the other half describe a
//! decoy mask from the same generator.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CmbError, Result};
use crate::features::{load_text_features, mask_descriptor, project_descriptor, TextFeatures};
use crate::imageio::{read_image, read_mask, write_mask, write_ppm, Mask};
use crate::tensor::Tensor;

pub const MIN_COVERAGE: f64 = 0.01;
pub const MAX_COVERAGE: f64 = 0.40;
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TamperKind {
    Splice,
    CopyMove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub text: String,
    pub matched: bool,
    pub kind: TamperKind,
    pub coverage: f64,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub mask: Mask,
    pub text: TextFeatures,
    pub matched: bool,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug)]
pub struct GenOptions {
    pub n: usize,
    pub seed: u64,
    pub size: usize,
    pub tokens: usize,
    pub width: usize,
}

/// Per-sample generator seeded from `(seed, index)`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Which samples get matched text: exactly `n / 2` (rounded down).
pub fn matched_flags(n: usize, seed: u64) -> Vec<bool> {
    let mut flags: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    flags.shuffle(&mut sample_rng(seed, u64::MAX));
    flags
}

fn random_shape(rng: &mut impl Rng, size: usize) -> Mask {
    let s = size as f64;
    loop {
        let mut m = Mask::zeros(size, size);
        let cx = rng.random_range(0.2 * s..0.8 * s);
        let cy = rng.random_range(0.2 * s..0.8 * s);
        let rx = rng.random_range(0.08 * s..0.3 * s);
        let ry = rng.random_range(0.08 * s..0.3 * s);
        let kind = rng.random_range(0..3);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (sin, cos) = angle.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
                let inside = match kind {
                    0 => u.abs() <= rx && v.abs() <= ry,
                    1 => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
                    _ => v >= -ry && v <= ry && u.abs() <= rx * (ry - v) / (2.0 * ry),
                };
                if inside {
                    m.data[y * size + x] = 1.0;
                }
            }
        }
        let c = m.coverage();
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&c) {
            return m;
        }
    }
}

struct Texture {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, f64, usize)>,
}

impl Texture {
    fn random(rng: &mut impl Rng) -> Self {
        let base = [0; 3].map(|_| rng.random_range(0.25..0.75));
        let waves = (0..3)
            .map(|_| {
                let f = rng.random_range(0.1..0.6);
                let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                (
                    f * t.cos(),
                    f * t.sin(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.03..0.1),
                    rng.random_range(0..3),
                )
            })
            .collect();
        Texture { base, waves }
    }

    fn at(&self, c: usize, y: f64, x: f64) -> f64 {
        let mut v = self.base[c];
        for &(fx, fy, phase, amp, ch) in &self.waves {
            let gain = if ch == c { 1.0 } else { 0.5 };
            v += gain * amp * (fx * x + fy * y + phase).sin();
        }
        v
    }
}

/// Renders one sample; returns `(image [3*H*W], mask, kind)`.
fn render(rng: &mut impl Rng, size: usize) -> (Vec<f64>, Mask, TamperKind) {
    let mask = random_shape(rng, size);
    let bg = Texture::random(rng);
    let kind = if rng.random_bool(0.5) {
        TamperKind::Splice
    } else {
        TamperKind::CopyMove
    };
    let donor = Texture::random(rng);
    let s = size as f64;
    let (oy, ox) = (rng.random_range(-0.4 * s..0.4 * s), rng.random_range(-0.4 * s..0.4 * s));
    let shift: [f64; 3] = [0; 3].map(|_| {
        let m: f64 = rng.random_range(0.04..0.1);
        if rng.random_bool(0.5) { m } else { -m }
    });
    let bg_sigma = rng.random_range(0.005..0.02);
    let patch_sigma = bg_sigma + rng.random_range(0.04..0.07);
    let bg_noise = Normal::new(0.0, bg_sigma).expect("finite sigma");
    let patch_noise = Normal::new(0.0, patch_sigma).expect("finite sigma");
    let hw = size * size;
    let mut img = vec![0.0; 3 * hw];
    for y in 0..size {
        for x in 0..size {
            let tampered = mask.get(y, x) == 1.0;
            for c in 0..3 {
                let (fy, fx) = (y as f64, x as f64);
                let v = if !tampered {
                    bg.at(c, fy, fx) + bg_noise.sample(rng)
                } else {
                    let clean = match kind {
                        TamperKind::Splice => donor.at(c, fy, fx),
                        TamperKind::CopyMove => bg.at(c, fy + oy, fx + ox),
                    };
                    clean + shift[c] + patch_noise.sample(rng)
                };
                img[c * hw + y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    (img, mask, kind)
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

/// Writes `images/`, `masks/`, `text/` and `manifest.jsonl` under `dir`.
pub fn gen_dataset(dir: impl AsRef<Path>, opts: GenOptions) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    if opts.size == 0 || opts.size % 16 != 0 {
        return Err(CmbError::Argument(format!(
            "image size {} is not a positive multiple of 16",
            opts.size
        )));
    }
    if opts.n == 0 {
        return Err(CmbError::Argument("dataset needs at least one sample".into()));
    }
    for sub in ["images", "masks", "text"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| CmbError::io(&p, e))?;
    }
    let flags = matched_flags(opts.n, opts.seed);
    let mut entries = Vec::with_capacity(opts.n);
    for (i, &matched) in flags.iter().enumerate() {
        let mut rng = sample_rng(opts.seed, i as u64);
        let (pixels, mask, kind) = render(&mut rng, opts.size);
        let described = if matched {
            mask.clone()
        } else {
            random_shape(&mut rng, opts.size)
        };
        let text = project_descriptor(&mask_descriptor(&described), opts.tokens, opts.width, &mut rng);
        let id = format!("{i:05}");
        let entry = ManifestEntry {
            image: format!("images/{id}.ppm"),
            mask: format!("masks/{id}.pgm"),
            text: format!("text/{id}.cmbt"),
            id,
            matched,
            kind,
            coverage: mask.coverage(),
        };
        write_ppm(dir.join(&entry.image), &Tensor::new(pixels, &[3, opts.size, opts.size])?)?;
        write_mask(dir.join(&entry.mask), &mask)?;
        TextFeatures::new(Tensor::new(text, &[opts.tokens, opts.width])?)?.save(dir.join(&entry.text))?;
        entries.push(entry);
    }
    let path = manifest_path(dir);
    let mut f = fs::File::create(&path).map_err(|e| CmbError::io(&path, e))?;
    for e in &entries {
        let line = serde_json::to_string(e).map_err(|e| CmbError::Validation(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| CmbError::io(&path, e))?;
    }
    Ok(entries)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = manifest_path(dir.as_ref());
    let f = fs::File::open(&path).map_err(|e| CmbError::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CmbError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            CmbError::Validation(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let samples = read_manifest(dir)?
            .into_iter()
            .map(|e| {
                let image = read_image(dir.join(&e.image))?;
                let mask = read_mask(dir.join(&e.mask))?;
                if image.shape()[1..] != [mask.h, mask.w] {
                    return Err(CmbError::shape(format!(
                        "{}: image {:?} vs mask {}x{}",
                        e.id,
                        image.shape(),
                        mask.h,
                        mask.w
                    )));
                }
                Ok(Sample {
                    image,
                    mask,
                    text: load_text_features(dir.join(&e.text))?,
                    matched: e.matched,
                    id: e.id,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the chosen samples into `([B,3,H,W], [B,N,D], masks)`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Vec<Mask>)> {
        let first = self.samples.get(idx[0]).ok_or_else(|| CmbError::Argument("empty batch".into()))?;
        let (is, ts) = (first.image.shape().to_vec(), first.text.tensor().shape().to_vec());
        let mut img = Vec::with_capacity(idx.len() * first.image.numel());
        let mut txt = Vec::with_capacity(idx.len() * first.text.tensor().numel());
        let mut masks = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &self.samples[i];
            if s.image.shape() != is.as_slice() || s.text.tensor().shape() != ts.as_slice() {
                return Err(CmbError::shape(format!("sample {} differs in shape from {}", s.id, first.id)));
            }
            img.extend_from_slice(s.image.data());
            txt.extend_from_slice(s.text.tensor().data());
            masks.push(s.mask.clone());
        }
        let b = idx.len();
        Ok((
            Tensor::new(img, &[b, is[0], is[1], is[2]])?,
            Tensor::new(txt, &[b, ts[0], ts[1]])?,
            masks,
        ))
    }
}
