//! Maps between images and backbone latents.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::schedule::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    #[default]
    Identity,
    ScaledIdentity,
    TinyAutoencoder,
}

impl std::str::FromStr for CodecKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CodecKind::Identity),
            "scaled_identity" | "scaled-identity" => Ok(CodecKind::ScaledIdentity),
            "tiny_autoencoder" | "tiny-autoencoder" => Ok(CodecKind::TinyAutoencoder),
            other => Err(Error::invalid(format!("unknown codec `{other}`"))),
        }
    }
}

pub trait LatentCodec: Send + Sync {
    fn encode(&self, x: &Image) -> Result<Latent>;
    fn decode(&self, z: &Latent) -> Result<Image>;
    fn latent_shape(&self, image_shape: [usize; 3]) -> Result<[usize; 3]>;
}

/// The latent is the image itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, x: &Image) -> Result<Latent> {
        Latent::new(x.data.clone())
    }

    fn decode(&self, z: &Latent) -> Result<Image> {
        Image::new(z.data.clone())
    }

    fn latent_shape(&self, image_shape: [usize; 3]) -> Result<[usize; 3]> {
        Ok(image_shape)
    }
}

/// The latent is the image times a constant.
#[derive(Debug, Clone, Copy)]
pub struct ScaledIdentityCodec {
    pub scale: f64,
}

impl ScaledIdentityCodec {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("codec scale {scale} must be positive")));
        }
        Ok(ScaledIdentityCodec { scale })
    }
}

impl LatentCodec for ScaledIdentityCodec {
    fn encode(&self, x: &Image) -> Result<Latent> {
        Latent::new(x.data.mapv(|v| v * self.scale))
    }

    fn decode(&self, z: &Latent) -> Result<Image> {
        Image::new(z.data.mapv(|v| v / self.scale))
    }

    fn latent_shape(&self, image_shape: [usize; 3]) -> Result<[usize; 3]> {
        Ok(image_shape)
    }
}

/// A linear autoencoder on non-overlapping 2×2 patches, fitted by principal
/// component analysis. The latent has one channel per component at half
/// resolution; with all components kept the round trip is exact up to
/// rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchAutoencoder {
    channels: usize,
    mean: Vec<f64>,
    /// `(components, patch_len)`, orthonormal rows.
    basis: Array2<f64>,
}

impl PatchAutoencoder {
    const P: usize = 2;

    /// Fits the basis on `images`, keeping `components` principal directions.
    pub fn fit(images: &[Image], components: usize) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::invalid("no images to fit"))?;
        let channels = first.shape()[0];
        let dim = channels * Self::P * Self::P;
        if components == 0 || components > dim {
            return Err(Error::invalid(format!("components must be in 1..={dim}")));
        }
        let mut patches = Vec::new();
        for img in images {
            if img.shape()[0] != channels {
                return Err(Error::invalid("images differ in channel count"));
            }
            patches.extend(Self::patches(img)?);
        }
        let n = patches.len() as f64;
        let mut mean = vec![0.0; dim];
        for p in &patches {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for p in &patches {
            let d = DMatrix::from_iterator(dim, 1, p.iter().zip(&mean).map(|(v, m)| v - m));
            cov += &d * d.transpose() / n;
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let basis = Array2::from_shape_fn((components, dim), |(k, j)| {
            eig.eigenvectors[(j, order[k])]
        });
        Ok(PatchAutoencoder {
            channels,
            mean,
            basis,
        })
    }

    fn patches(img: &Image) -> Result<Vec<Vec<f64>>> {
        let [c, h, w] = img.shape();
        if h % Self::P != 0 || w % Self::P != 0 {
            return Err(Error::invalid("image size must be even for the patch codec"));
        }
        let mut out = Vec::with_capacity(h * w / 4);
        for by in 0..h / Self::P {
            for bx in 0..w / Self::P {
                out.push(Self::patch(&img.data, c, by, bx));
            }
        }
        Ok(out)
    }

    fn patch(data: &Array3<f64>, c: usize, by: usize, bx: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(c * 4);
        for ch in 0..c {
            for dy in 0..Self::P {
                for dx in 0..Self::P {
                    v.push(data[[ch, by * Self::P + dy, bx * Self::P + dx]]);
                }
            }
        }
        v
    }
}

impl LatentCodec for PatchAutoencoder {
    fn encode(&self, x: &Image) -> Result<Latent> {
        let [c, h, w] = x.shape();
        if c != self.channels {
            return Err(Error::invalid("channel count differs from the fitted codec"));
        }
        let k = self.basis.nrows();
        let mut z = Array3::zeros((k, h / Self::P, w / Self::P));
        for (i, p) in Self::patches(x)?.into_iter().enumerate() {
            let (by, bx) = (i / (w / Self::P), i % (w / Self::P));
            for comp in 0..k {
                z[[comp, by, bx]] = self
                    .basis
                    .row(comp)
                    .iter()
                    .zip(p.iter().zip(&self.mean))
                    .map(|(b, (v, m))| b * (v - m))
                    .sum();
            }
        }
        Latent::new(z)
    }

    fn decode(&self, z: &Latent) -> Result<Image> {
        let [k, hh, ww] = z.shape();
        if k != self.basis.nrows() {
            return Err(Error::invalid("latent channel count differs from the codec"));
        }
        let mut x = Array3::zeros((self.channels, hh * Self::P, ww * Self::P));
        for by in 0..hh {
            for bx in 0..ww {
                let mut p = self.mean.clone();
                for comp in 0..k {
                    let a = z.data[[comp, by, bx]];
                    for (pj, bj) in p.iter_mut().zip(self.basis.row(comp)) {
                        *pj += a * bj;
                    }
                }
                let mut it = p.into_iter();
                for ch in 0..self.channels {
                    for dy in 0..Self::P {
                        for dx in 0..Self::P {
                            x[[ch, by * Self::P + dy, bx * Self::P + dx]] = it.next().unwrap();
                        }
                    }
                }
            }
        }
        Image::new(x)
    }

    fn latent_shape(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        if c != self.channels || h % Self::P != 0 || w % Self::P != 0 {
            return Err(Error::invalid("image shape incompatible with the patch codec"));
        }
        Ok([self.basis.nrows(), h / Self::P, w / Self::P])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::metrics::psnr;
    use crate::pipeline::toy::random_specs;

    fn toy_images(n: usize, seed: u64) -> Vec<Image> {
        random_specs(n, seed, 32, 32)
            .iter()
            .map(|s| s.render(32, 32).unwrap())
            .collect()
    }

    #[test]
    fn identity_is_exact_and_scaled_identity_inverts() {
        let imgs = toy_images(3, 1);
        for x in &imgs {
            assert_eq!(IdentityCodec.decode(&IdentityCodec.encode(x).unwrap()).unwrap(), *x);
            let c = ScaledIdentityCodec::new(0.5).unwrap();
            assert_eq!(c.decode(&c.encode(x).unwrap()).unwrap(), *x);
        }
        assert!(ScaledIdentityCodec::new(0.0).is_err());
    }

    #[test]
    fn patch_autoencoder_round_trip_psnr() {
        let fit = toy_images(64, 2);
        let full = PatchAutoencoder::fit(&fit, 12).unwrap();
        for x in toy_images(10, 3) {
            let z = full.encode(&x).unwrap();
            assert_eq!(z.shape(), [12, 16, 16]);
            let back = full.decode(&z).unwrap();
            assert!(psnr(&back, &x).unwrap() > 100.0);
        }
        assert!(PatchAutoencoder::fit(&fit, 13).is_err());
    }
}
