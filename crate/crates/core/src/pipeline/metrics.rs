//! Reconstruction, structure and texture measurements on images.
//!
//! The structure score is the intersection-over-union of foreground masks,
//! where foreground is anything that differs from the border color. The edge
//! score compares mask outlines with a one-pixel tolerance. The texture
//! distance compares per-channel means and standard deviations.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

/// Per-channel deviation from the border color above which a pixel counts
/// as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub mse: f64,
    /// Peak signal-to-noise ratio in dB for the `[-1, 1]` range; infinite
    /// for identical images.
    #[serde(with = "infinite_as_string")]
    pub psnr: f64,
    pub structure_iou: f64,
    pub edge_overlap: f64,
    pub texture_distance: Option<f64>,
}

mod infinite_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad psnr `{s}`"))),
        }
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "image metric",
            expected: b.shape().to_vec(),
            got: a.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    Ok((&a.data - &b.data).mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// PSNR with peak-to-peak range 2.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (4.0 / m).log10()
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pixels whose color deviates from the border median by more than
/// [`FOREGROUND_THRESHOLD`] in any channel.
pub fn foreground_mask(img: &Image) -> Array2<bool> {
    let [c, h, w] = img.shape();
    let background: Vec<f64> = (0..c)
        .map(|ch| {
            let plane = img.data.index_axis(Axis(0), ch);
            let mut border = Vec::with_capacity(2 * (h + w));
            for x in 0..w {
                border.push(plane[[0, x]]);
                border.push(plane[[h - 1, x]]);
            }
            for y in 1..h.saturating_sub(1) {
                border.push(plane[[y, 0]]);
                border.push(plane[[y, w - 1]]);
            }
            median(border)
        })
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).any(|ch| (img.data[[ch, y, x]] - background[ch]).abs() > FOREGROUND_THRESHOLD)
    })
}

pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Foreground pixels with at least one 4-neighbor outside the foreground.
pub fn outline(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        mask[[y, x]]
            && [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 || !mask[[ny as usize, nx as usize]]
            })
    })
}

fn near(mask: &Array2<bool>, y: usize, x: usize) -> bool {
    let (h, w) = mask.dim();
    (y.saturating_sub(1)..(y + 2).min(h)).any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| mask[[yy, xx]]))
}

/// Symmetric outline agreement with a one-pixel tolerance, in `[0, 1]`.
pub fn edge_overlap(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (ea, eb) = (outline(&foreground_mask(a)), outline(&foreground_mask(b)));
    let (na, nb) = (ea.iter().filter(|v| **v).count(), eb.iter().filter(|v| **v).count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let hits = |from: &Array2<bool>, to: &Array2<bool>| {
        from.indexed_iter().filter(|((y, x), v)| **v && near(to, *y, *x)).count()
    };
    Ok((hits(&ea, &eb) + hits(&eb, &ea)) as f64 / (na + nb) as f64)
}

pub fn structure_iou(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    Ok(mask_iou(&foreground_mask(a), &foreground_mask(b)))
}

/// Per-channel `(mean, standard deviation)`.
pub fn channel_stats(img: &Image) -> Vec<(f64, f64)> {
    img.data
        .axis_iter(Axis(0))
        .map(|p| (p.mean().unwrap_or(0.0), p.std(0.0)))
        .collect()
}

/// Euclidean distance between channel mean/std vectors.
pub fn texture_distance(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    Ok(channel_stats(a)
        .iter()
        .zip(channel_stats(b))
        .map(|((ma, sa), (mb, sb))| (ma - mb).powi(2) + (sa - sb).powi(2))
        .sum::<f64>()
        .sqrt())
}

pub fn evaluate_metrics(x_out: &Image, x_src: &Image, x_ref: Option<&Image>) -> Result<MetricBlock> {
    Ok(MetricBlock {
        mse: mse(x_out, x_src)?,
        psnr: psnr(x_out, x_src)?,
        structure_iou: structure_iou(x_out, x_src)?,
        edge_overlap: edge_overlap(x_out, x_src)?,
        texture_distance: x_ref.map(|r| texture_distance(x_out, r)).transpose()?,
    })
}
