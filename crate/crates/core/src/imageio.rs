//! 8-bit PGM (P5) / PPM (P6) input and output.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{CmbError, Result};
use crate::tensor::Tensor;

/// Binary `H x W` mask stored as 0.0 / 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    /// Validates that every value is exactly 0 or 1.
    pub fn from_values(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(CmbError::shape(format!(
                "mask {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(CmbError::Validation(format!("mask value {v} is not binary")));
        }
        Ok(Mask { h, w, data })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn coverage(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Nearest-neighbour resize (stays binary).
    pub fn resize_nearest(&self, h: usize, w: usize) -> Mask {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = y * self.h / h;
            for x in 0..w {
                data.push(self.get(sy, x * self.w / w));
            }
        }
        Mask { h, w, data }
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[1, 1, self.h, self.w]).expect("mask shape")
    }
}

fn image_err(path: &Path, e: image::ImageError) -> CmbError {
    match e {
        image::ImageError::IoError(io) => CmbError::io(path, io),
        other => CmbError::Format {
            offset: 0,
            message: format!("{}: {other}", path.display()),
        },
    }
}

/// Reads a P5 or P6 image as a `[3, H, W]` tensor in `[0, 1]`; grayscale is
/// replicated across channels.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| CmbError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CmbError::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(data, &[3, h, w])
}

/// Reads a PGM mask; values at or above 128 are foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let mut reader = ImageReader::open(path).map_err(|e| CmbError::io(path, e))?;
    reader.set_format(ImageFormat::Pnm);
    let img = reader
        .decode()
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Mask { h, w, data })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pnm(path: &Path, bytes: &[u8], w: usize, h: usize, color: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| CmbError::io(path, e))?;
    let subtype = if color {
        PnmSubtype::Pixmap(SampleEncoding::Binary)
    } else {
        PnmSubtype::Graymap(SampleEncoding::Binary)
    };
    let kind = if color {
        ExtendedColorType::Rgb8
    } else {
        ExtendedColorType::L8
    };
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(bytes, w as u32, h as u32, kind)
        .map_err(|e| image_err(path, e))
}

/// Writes a `[3, H, W]` tensor in `[0, 1]` as P6.
pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CmbError::shape(format!("write_ppm needs [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push(to_byte(d[c * h * w + i]));
        }
    }
    write_pnm(path.as_ref(), &bytes, w, h, true)
}

/// Writes values in `[0, 1]` as P5 (`x 255`, rounded).
pub fn write_pgm(path: impl AsRef<Path>, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(CmbError::shape(format!(
            "write_pgm {h}x{w} with {} values",
            values.len()
        )));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| to_byte(v)).collect();
    write_pnm(path.as_ref(), &bytes, w, h, false)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    write_pgm(path, &mask.data, mask.h, mask.w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f64> = (0..3 * 4 * 6).map(|i| f64::from(i % 256) / 255.0).collect();
        let img = Tensor::new(vals.clone(), &[3, 4, 6]).unwrap();
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &img).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..2], b"P6");
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), &[3, 4, 6]);
        for (a, b) in back.data().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-12);
        }

        let mask = Mask::from_values(2, 3, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = dir.path().join("m.pgm");
        write_mask(&m, &mask).unwrap();
        assert_eq!(&std::fs::read(&m).unwrap()[..2], b"P5");
        assert_eq!(read_mask(&m).unwrap(), mask);
        let gray = read_image(&m).unwrap();
        assert_eq!(gray.shape(), &[3, 2, 3]);
    }

    #[test]
    fn non_binary_mask_rejected() {
        assert!(Mask::from_values(1, 2, vec![0.0, 0.5]).is_err());
    }
}
