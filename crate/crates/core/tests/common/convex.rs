//! A linearly conditioned Gaussian model on a 4-element latent with a
//! single 4-wide token, so the guided clean-latent estimate is affine and
//! invertible in the embedding.

use conceptshift::backbone::{ConceptEmbedding, Denoiser, GaussianOracle};
use conceptshift::inversion::{pivotal_tuning_inversion, InversionHyperparams, PerStepEmbeddings, PtiLrSchedule};
use conceptshift::schedule::{make_schedule, Latent, ScheduleKind};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHAPE: (usize, usize, usize) = (1, 2, 2);
pub const DIM: usize = 4;

pub struct Problem {
    pub oracle: GaussianOracle,
    mean: Vec<f64>,
    var: Vec<f64>,
    cond: DMatrix<f64>,
    pub z_src: Latent,
    pub z_start: Latent,
}

pub fn problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = SHAPE.0 * SHAPE.1 * SHAPE.2;
    let mean: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    // Identity plus a small perturbation keeps the map well conditioned.
    let cond = DMatrix::from_fn(n, DIM, |i, j| f64::from(u8::from(i == j)) + rng.gen_range(-0.3..0.3));
    let mut draw = |scale: f64| {
        let v: Vec<f64> = (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        Latent::new(Array3::from_shape_vec(SHAPE, v).unwrap()).unwrap()
    };
    let z_src = draw(1.0);
    let z_start = draw(1.5);
    let oracle = GaussianOracle::new(
        Array3::from_shape_vec(SHAPE, mean.clone()).unwrap(),
        Array3::from_shape_vec(SHAPE, var.clone()).unwrap(),
        Some(Array2::from_shape_fn((n, DIM), |(i, j)| cond[(i, j)])),
        DIM,
        make_schedule(200, ScheduleKind::Linear).unwrap(),
    )
    .unwrap();
    Problem { oracle, mean, var, cond, z_src, z_start }
}

pub fn zero_embedding() -> ConceptEmbedding {
    ConceptEmbedding::new(Array2::zeros((1, DIM)), "null").unwrap()
}

/// Solves `ẑ0(v) = z_src` at latent `z` and timestep `t` directly from the
/// Gaussian posterior mean, with the zero embedding as the unconditional
/// branch:
/// `ẑ0(v) = z/√ā − √(1−ā)/√ā·ε(0) + w(1−ā)·(W v)/d`, `d = āσ² + 1 − ā`.
pub fn closed_form(p: &Problem, z: &Latent, t: usize, w: f64) -> DVector<f64> {
    let a = p.oracle.schedule().alpha_bar(t);
    let (ca, cb) = (a.sqrt(), (1.0 - a).sqrt());
    let n = p.mean.len();
    let z: Vec<f64> = z.data.iter().copied().collect();
    let src: Vec<f64> = p.z_src.data.iter().copied().collect();
    let mut rhs = DVector::zeros(n);
    let mut m = DMatrix::zeros(n, DIM);
    for i in 0..n {
        let d = a * p.var[i] + 1.0 - a;
        let eps0 = cb * (z[i] - ca * p.mean[i]) / d;
        rhs[i] = src[i] - (z[i] / ca - cb / ca * eps0);
        for j in 0..DIM {
            m[(i, j)] = w * cb * cb * p.cond[(i, j)] / d;
        }
    }
    m.lu().solve(&rhs).expect("invertible")
}

pub fn run(p: &Problem, steps: usize, w: f64) -> PerStepEmbeddings {
    let hp = InversionHyperparams {
        pti_inner_steps: Some(500),
        pti_lr: PtiLrSchedule::Constant { lr: 1e-2 },
        ..Default::default()
    };
    let null = zero_embedding();
    pivotal_tuning_inversion(&p.oracle, &p.z_src, &p.z_start, steps, w, &hp, &null, &null).unwrap()
}

/// Worst kept residual and worst relative distance to the closed form over
/// all timesteps.
pub fn worst(p: &Problem, r: &PerStepEmbeddings, w: f64) -> (f64, f64) {
    let mut out = (0.0f64, 0.0f64);
    for i in 0..r.steps() {
        let (t, _, v) = r.step(i);
        let star = closed_form(p, &r.trajectory[i], t, w);
        let got = DVector::from_iterator(DIM, v.data.iter().copied());
        out.0 = out.0.max(r.losses[i].kept);
        out.1 = out.1.max((&got - &star).norm() / star.norm());
    }
    out
}
