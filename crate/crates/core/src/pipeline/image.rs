//! RGB images in `[-1, 1]` and their PNG form.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A channel-major `(C, H, W)` image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Image { data })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    /// Clamps to `[-1, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.mapv(|v| v.clamp(-1.0, 1.0)),
        }
    }

    /// Quantizes to 8 bits per channel, exactly as [`Image::save_png`] stores it.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        let [c, h, w] = self.shape();
        if c != 3 {
            return Err(Error::invalid(format!("expected 3 channels, got {c}")));
        }
        Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = self.data[[ch, y as usize, x as usize]].clamp(-1.0, 1.0);
                ((v + 1.0) * 127.5).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        }))
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0
        });
        Image { data }
    }

    /// 8-bit quantization round trip.
    pub fn quantized(&self) -> Result<Image> {
        Ok(Image::from_rgb8(&self.to_rgb8()?))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }

    /// SHA-256 over the shape and the `f64` bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.data.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.data.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
