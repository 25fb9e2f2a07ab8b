//! RGB images as channel-major `f32` planes in `[0, 1]`, with PNG I/O.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, ImageFormat, RgbImage};

use crate::error::{DacError, Result};
use crate::tensor_util::sha256_hex;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// `3 x height x width`, channel-major.
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(DacError::Shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DacError::Validation("image has non-finite pixels".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Decodes PNG (or any format the decoder recognizes) and resizes to
    /// `size x size` when the dimensions differ.
    pub fn from_encoded(bytes: &[u8], size: Option<usize>) -> Result<Self> {
        let decoded = image::load_from_memory(bytes)?.to_rgb8();
        let decoded = match size {
            Some(s) if decoded.width() as usize != s || decoded.height() as usize != s => {
                image::imageops::resize(&decoded, s as u32, s as u32, FilterType::Triangle)
            }
            _ => decoded,
        };
        Ok(Self::from_rgb8(&decoded))
    }

    pub fn load(path: &Path, size: Option<usize>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DacError::load(path, e))?;
        Self::from_encoded(&bytes, size).map_err(|e| DacError::load(path, e))
    }

    fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * w * h + y as usize * w + x as usize] = p[c] as f32 / 255.0;
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (w, h) = (self.width, self.height);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| {
                let v = self.data[c * w * h + y as usize * w + x as usize];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([at(0), at(1), at(2)])
        })
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Writes the image as PNG, atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::tensor_util::atomic_write(path, &self.to_png()?)
    }

    /// Image quantized to 8 bits per channel, as it would be after a PNG round trip.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(&self.to_rgb8())
    }

    /// SHA-256 of the PNG encoding.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_png()?))
    }

    /// `(1, 3, h, w)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Splits a `(b, 3, h, w)` tensor into images, clamping to `[0, 1]`.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Self>> {
        let (b, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(DacError::Shape(format!("expected 3 channels, got {c}")));
        }
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(DacError::Numeric {
                layer: "decode".into(),
            });
        }
        Ok(flat
            .chunks(3 * h * w)
            .take(b)
            .map(|chunk| Self {
                width: w,
                height: h,
                data: chunk.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            })
            .collect())
    }

    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    fn check_same_size(&self, other: &Self) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(DacError::Validation(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Mean squared pixel difference.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        self.masked_mse(other, None)
    }

    /// Mean squared difference over pixels where `mask` (row-major, `h x w`) is true.
    pub fn masked_mse(&self, other: &Self, mask: Option<&[bool]>) -> Result<f64> {
        self.check_same_size(other)?;
        let n = self.width * self.height;
        if let Some(m) = mask {
            if m.len() != n {
                return Err(DacError::Shape(format!("mask has {} entries for {n} pixels", m.len())));
            }
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            for c in 0..3 {
                let d = (self.data[c * n + i] - other.data[c * n + i]) as f64;
                sum += d * d;
            }
            count += 3;
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }
}
