#![allow(dead_code)]

pub mod convex;

use std::path::PathBuf;

use conceptshift::backbone::{ConceptEmbedding, EmbeddingTable, GaussianOracle, TinyConfig, TinyDenoiser, TOY_WORDS};
use conceptshift::inversion::InversionHyperparams;
use conceptshift::pipeline::{Image, TranslationConfig};
use conceptshift::schedule::{make_schedule, Latent, ScheduleKind};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The trained toy backbone shipped with the tests.
pub fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy_backbone.cs")
}

/// An untrained two-channel 8×8 denoiser, cheap enough for full pipelines.
pub fn small() -> TinyDenoiser {
    let cfg = TinyConfig {
        channels: 2,
        height: 8,
        width: 8,
        base_width: 4,
        mid_width: 8,
        embed_dim: 6,
        heads: 2,
        time_features: 8,
        time_dim: 8,
        max_tokens: 4,
        context_gain: 3.0,
    };
    TinyDenoiser::new(cfg, make_schedule(100, ScheduleKind::Linear).unwrap(), 5).unwrap()
}

pub fn small_table() -> EmbeddingTable {
    EmbeddingTable::seeded(TOY_WORDS, 6, 3).unwrap()
}

pub fn small_null() -> ConceptEmbedding {
    small_table().null_embedding(2)
}

pub fn image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(Array3::from_shape_simple_fn((2, 8, 8), || rng.gen_range(-1.0..1.0))).unwrap()
}

/// Short inversions for the small model.
pub fn quick(w: f64, steps: usize) -> TranslationConfig {
    TranslationConfig {
        w,
        steps,
        hp: InversionHyperparams {
            pti_total_steps: 20 * steps,
            pti_inner_steps: Some(3),
            mci_steps: 4,
            mci_batch: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Independent per-element Gaussian data at unit scale, with a sample.
pub fn gaussian(seed: u64, steps: usize) -> (GaussianOracle, Latent) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = (2, 4, 4);
    let mean: Array3<f64> = Array3::from_shape_simple_fn(shape, || rng.gen_range(-0.5..0.5));
    let var: Array3<f64> = Array3::from_shape_simple_fn(shape, || rng.gen_range(0.5..1.5));
    let z = Array3::from_shape_fn(shape, |i| {
        let n: f64 = rng.sample(rand_distr::StandardNormal);
        mean[i] + var[i].sqrt() * n
    });
    let s = make_schedule(steps, ScheduleKind::Linear).unwrap();
    (GaussianOracle::new(mean, var, None, 4, s).unwrap(), Latent::new(z).unwrap())
}

pub fn rel(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let d: f64 = (a - b).mapv(|x| x * x).sum();
    (d / b.mapv(|x| x * x).sum()).sqrt()
}

/// Relative disagreement between an analytic and a numerical derivative,
/// with an absolute floor for near-zero entries.
pub fn grad_rel(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
