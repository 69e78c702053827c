//! Procedural shape/texture images with matching word prompts.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::LatentCodec;
use super::image::Image;
use crate::backbone::LabeledLatent;
use crate::error::{Error, Result};

pub const COLORS: &[(&str, [f64; 3])] = &[
    ("red", [0.90, 0.15, 0.12]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.35, 0.95]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("cyan", [0.15, 0.85, 0.85]),
    ("magenta", [0.85, 0.20, 0.80]),
    ("white", [0.92, 0.92, 0.92]),
    ("orange", [0.95, 0.55, 0.10]),
];

pub const TEXTURES: &[&str] = &["solid", "striped", "checkered"];
pub const SHAPES: &[&str] = &["square", "circle", "triangle"];

/// Background color in `[0, 1]` RGB.
pub const BACKGROUND: [f64; 3] = [0.08, 0.08, 0.10];

/// Brightness of the secondary phase of a pattern, relative to the color.
const PATTERN_DARK: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub color: String,
    pub texture: String,
    pub shape: String,
    /// Center in pixels, `(row, column)`.
    pub center: (f64, f64),
    /// Half side for squares and triangles, radius for circles.
    pub size: f64,
}

impl ShapeSpec {
    pub fn words(&self) -> Vec<String> {
        vec![self.color.clone(), self.texture.clone(), self.shape.clone()]
    }

    fn rgb(&self) -> Result<[f64; 3]> {
        COLORS
            .iter()
            .find(|(n, _)| *n == self.color)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::invalid(format!("unknown color `{}`", self.color)))
    }

    fn covers(&self, y: f64, x: f64) -> Result<bool> {
        let (cy, cx) = self.center;
        let (dy, dx) = (y - cy, x - cx);
        let s = self.size;
        Ok(match self.shape.as_str() {
            "square" => dy.abs() <= s && dx.abs() <= s,
            "circle" => dy * dy + dx * dx <= s * s,
            // apex up, base at cy + s
            "triangle" => dy >= -s && dy <= s && dx.abs() <= (dy + s) / 2.0,
            other => return Err(Error::invalid(format!("unknown shape `{other}`"))),
        })
    }

    fn bright(&self, row: usize, col: usize) -> Result<bool> {
        Ok(match self.texture.as_str() {
            "solid" => true,
            "striped" => (row / 2).is_multiple_of(2),
            "checkered" => (row / 2 + col / 2).is_multiple_of(2),
            other => return Err(Error::invalid(format!("unknown texture `{other}`"))),
        })
    }

    /// Renders on the dark background at `size × size` pixels.
    pub fn render(&self, height: usize, width: usize) -> Result<Image> {
        let color = self.rgb()?;
        let mut data = Array3::zeros((3, height, width));
        for r in 0..height {
            for c in 0..width {
                let rgb = if self.covers(r as f64 + 0.5, c as f64 + 0.5)? {
                    let k = if self.bright(r, c)? { 1.0 } else { PATTERN_DARK };
                    color.map(|v| v * k)
                } else {
                    BACKGROUND
                };
                for ch in 0..3 {
                    data[[ch, r, c]] = rgb[ch] * 2.0 - 1.0;
                }
            }
        }
        Image::new(data)
    }
}

/// The fixed translation pair: a solid red square and a striped blue circle
/// of about the same area.
pub fn toy_pair() -> (ShapeSpec, ShapeSpec) {
    let source = ShapeSpec {
        color: "red".into(),
        texture: "solid".into(),
        shape: "square".into(),
        center: (16.0, 16.0),
        size: 6.0,
    };
    let reference = ShapeSpec {
        color: "blue".into(),
        texture: "striped".into(),
        shape: "circle".into(),
        center: (16.0, 16.0),
        size: 6.8,
    };
    (source, reference)
}

/// `n` random shapes, deterministic in `seed`.
pub fn random_specs(n: usize, seed: u64, height: usize, width: usize) -> Vec<ShapeSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = height.min(width) as f64;
    (0..n)
        .map(|_| {
            let size = rng.gen_range(0.16..0.26) * extent;
            let margin = size + 1.0;
            ShapeSpec {
                color: COLORS[rng.gen_range(0..COLORS.len())].0.to_string(),
                texture: TEXTURES[rng.gen_range(0..TEXTURES.len())].to_string(),
                shape: SHAPES[rng.gen_range(0..SHAPES.len())].to_string(),
                center: (
                    rng.gen_range(margin..height as f64 - margin),
                    rng.gen_range(margin..width as f64 - margin),
                ),
                size,
            }
        })
        .collect()
}

/// Renders `n` random shapes and encodes them with their prompts.
pub fn training_set(
    n: usize,
    seed: u64,
    codec: &dyn LatentCodec,
    height: usize,
    width: usize,
) -> Result<Vec<LabeledLatent>> {
    random_specs(n, seed, height, width)
        .iter()
        .map(|s| {
            Ok(LabeledLatent {
                latent: codec.encode(&s.render(height, width)?)?,
                words: s.words(),
            })
        })
        .collect()
}
