//! Diffusion arithmetic: noise schedules, forward noising, clean-latent
//! estimation and deterministic DDIM steps in both directions.
//!
//! Everything here is a pure function of its inputs.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Shape of a latent tensor: (channels, height, width).
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind '{other}'"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

const MAX_BETA: f64 = 0.999;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 0.008;

/// Cumulative signal rates `alpha_bar[0..=T]`.
///
/// `alpha_bar[0]` is exactly one, the sequence is strictly decreasing, and the
/// terminal value lies in `(0, 0.05)`. The invariants are checked on
/// construction and on deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        NoiseSchedule::from_alpha_bar(r.kind, r.alpha_bar)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr {
            kind: s.kind,
            alpha_bar: s.alpha_bar,
        }
    }
}

/// Builds a schedule with `steps` noising steps.
///
/// The linear schedule uses betas on `[1e-4, 2e-2]` rescaled by `1000 / steps`
/// so that short schedules still end near pure noise; betas are clipped at
/// 0.999.
pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / steps as f64;
            let (b0, b1) = (scale * LINEAR_BETA_START, scale * LINEAR_BETA_END);
            (0..steps)
                .map(|i| {
                    let frac = i as f64 / (steps - 1) as f64;
                    (b0 + (b1 - b0) * frac).min(MAX_BETA)
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (0..steps)
                .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-8, MAX_BETA))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    NoiseSchedule::from_alpha_bar(kind, alpha_bar)
}

impl NoiseSchedule {
    /// Validates and wraps an explicit `alpha_bar` table.
    pub fn from_alpha_bar(kind: ScheduleKind, alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(Error::invalid("alpha_bar needs at least 3 entries"));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::invalid("alpha_bar[0] must be exactly 1"));
        }
        if alpha_bar.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("alpha_bar contains non-finite entries"));
        }
        if let Some(i) = alpha_bar.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::invalid(format!(
                "alpha_bar not strictly decreasing at index {}",
                i + 1
            )));
        }
        let last = *alpha_bar.last().unwrap();
        if !(last > 0.0 && last < 0.05) {
            return Err(Error::invalid(format!(
                "terminal alpha_bar {last} outside (0, 0.05)"
            )));
        }
        Ok(NoiseSchedule { kind, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of noising steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// SHA-256 over the little-endian bit patterns of the table.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.alpha_bar {
            h.update(a.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_t(&self, t: usize, context: &'static str) -> Result<()> {
        if t > self.steps() {
            return Err(Error::OutOfRange {
                context,
                index: t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// Evenly strided sampling indices `0 = τ_0 < τ_1 < … < τ_n = T`.
    pub fn sampling_grid(&self, n: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if n == 0 || n > total {
            return Err(Error::invalid(format!(
                "sampling step count {n} must lie in 1..={total}"
            )));
        }
        Ok((0..=n)
            .map(|k| ((k * total) as f64 / n as f64).round() as usize)
            .collect())
    }

    /// Forward noising: `sqrt(ā_t)·z0 + sqrt(1 − ā_t)·ε`.
    pub fn add_noise(&self, z0: &Latent, eps: &NoiseSample, t: usize) -> Result<Latent> {
        self.check_t(t, "add_noise")?;
        same_shape("add_noise", z0.shape(), eps.shape())?;
        let a = self.alpha_bar[t];
        let (ca, cb) = (a.sqrt(), (1.0 - a).sqrt());
        let data = Zip::from(&z0.data)
            .and(&eps.data)
            .map_collect(|&z, &e| ca * z + cb * e);
        Ok(Latent::raw(data).at_step(t))
    }

    /// Clean-latent estimate `(z_t − sqrt(1 − ā_t)·ε̂) / sqrt(ā_t)`.
    ///
    /// Rejects `t = 0`, where the estimate is the identity.
    pub fn predict_z0(&self, z_t: &Latent, eps_hat: &NoiseSample, t: usize) -> Result<Latent> {
        self.check_t(t, "predict_z0")?;
        if t == 0 {
            return Err(Error::invalid("predict_z0 requires t >= 1"));
        }
        same_shape("predict_z0", z_t.shape(), eps_hat.shape())?;
        let a = self.alpha_bar[t];
        let (inv, cb) = (1.0 / a.sqrt(), (1.0 - a).sqrt());
        let data = Zip::from(&z_t.data)
            .and(&eps_hat.data)
            .map_collect(|&z, &e| (z - cb * e) * inv);
        Ok(Latent::raw(data).at_step(0))
    }

    /// Deterministic (η = 0) DDIM update from `t` down to `t_prev`.
    pub fn ddim_step(
        &self,
        z_t: &Latent,
        eps_hat: &NoiseSample,
        t: usize,
        t_prev: usize,
    ) -> Result<Latent> {
        self.check_t(t, "ddim_step")?;
        if t_prev >= t {
            return Err(Error::invalid(format!(
                "ddim_step needs t_prev < t, got t_prev={t_prev}, t={t}"
            )));
        }
        let z0 = self.predict_z0(z_t, eps_hat, t)?;
        Ok(self.recombine(&z0, eps_hat, t_prev))
    }

    /// Reverse DDIM update from `t` up to `t_next`; at `t = 0` the clean
    /// estimate is `z_t` itself.
    pub fn ddim_invert_step(
        &self,
        z_t: &Latent,
        eps_hat: &NoiseSample,
        t: usize,
        t_next: usize,
    ) -> Result<Latent> {
        self.check_t(t_next, "ddim_invert_step")?;
        if t >= t_next {
            return Err(Error::invalid(format!(
                "ddim_invert_step needs t < t_next, got t={t}, t_next={t_next}"
            )));
        }
        same_shape("ddim_invert_step", z_t.shape(), eps_hat.shape())?;
        let z0 = if t == 0 {
            z_t.clone()
        } else {
            self.predict_z0(z_t, eps_hat, t)?
        };
        Ok(self.recombine(&z0, eps_hat, t_next))
    }

    fn recombine(&self, z0: &Latent, eps: &NoiseSample, t: usize) -> Latent {
        let a = self.alpha_bar[t];
        let (ca, cb) = (a.sqrt(), (1.0 - a).sqrt());
        let data = Zip::from(&z0.data)
            .and(&eps.data)
            .map_collect(|&z, &e| ca * z + cb * e);
        Latent::raw(data).at_step(t)
    }
}

fn same_shape(context: &'static str, a: Shape3, b: Shape3) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            context,
            expected: a.to_vec(),
            got: b.to_vec(),
        });
    }
    Ok(())
}

fn shape_of(a: &Array3<f64>) -> Shape3 {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

fn check_finite(a: &Array3<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(what, 0))
    }
}

/// A diffusion latent `z_t` of shape (channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Array3<f64>,
    /// Which `z_t` this is, when known.
    pub step: Option<usize>,
}

impl Latent {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        check_finite(&data, "latent")?;
        Ok(Latent::raw(data))
    }

    pub(crate) fn raw(data: Array3<f64>) -> Self {
        Latent { data, step: None }
    }

    pub fn zeros(shape: Shape3) -> Self {
        Latent::raw(Array3::zeros(shape))
    }

    pub fn at_step(mut self, t: usize) -> Self {
        self.step = Some(t);
        self
    }

    pub fn shape(&self) -> Shape3 {
        shape_of(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, stage: &str, step: usize) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(stage, step))
        }
    }
}

/// A Gaussian noise draw or a network's noise prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub data: Array3<f64>,
}

impl NoiseSample {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        check_finite(&data, "noise sample")?;
        Ok(NoiseSample { data })
    }

    pub(crate) fn raw(data: Array3<f64>) -> Self {
        NoiseSample { data }
    }

    pub fn zeros(shape: Shape3) -> Self {
        NoiseSample::raw(Array3::zeros(shape))
    }

    pub fn shape(&self) -> Shape3 {
        shape_of(&self.data)
    }

    /// Standard normal draw.
    pub fn gaussian<R: rand::Rng + ?Sized>(shape: Shape3, rng: &mut R) -> Self {
        use rand_distr::StandardNormal;
        let data = Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal));
        NoiseSample::raw(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn lat(v: &[f64]) -> Latent {
        Latent::new(Array3::from_shape_vec([1, 1, v.len()], v.to_vec()).unwrap()).unwrap()
    }

    fn noise(v: &[f64]) -> NoiseSample {
        NoiseSample::new(Array3::from_shape_vec([1, 1, v.len()], v.to_vec()).unwrap()).unwrap()
    }

    /// Three-entry schedule with alpha_bar[1] = 0.25.
    fn quarter() -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(ScheduleKind::Linear, vec![1.0, 0.25, 0.01]).unwrap()
    }

    #[test]
    fn rejects_short_and_unknown() {
        assert!(make_schedule(1, ScheduleKind::Linear).is_err());
        assert!("sigmoid".parse::<ScheduleKind>().is_err());
        assert_eq!("cosine".parse::<ScheduleKind>().unwrap(), ScheduleKind::Cosine);
    }

    #[test]
    fn schedules_satisfy_invariants() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for t in [2, 3, 10, 50, 200, 1000] {
                let s = make_schedule(t, kind).unwrap();
                assert_eq!(s.alpha_bar(0), 1.0);
                assert_eq!(s.steps(), t);
            }
        }
    }

    #[test]
    fn linear_1000_terminal_matches_product_oracle() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        // exp of summed log-survival over the same linear beta grid
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let oracle = log_sum.exp();
        assert!((s.alpha_bar(1000) - oracle).abs() / oracle < 1e-9);
        assert!((s.alpha_bar(1000) - 4.0e-5).abs() < 0.2e-5, "{}", s.alpha_bar(1000));
    }

    #[test]
    fn deserialization_enforces_monotonicity() {
        let bad = r#"{"kind":"linear","alpha_bar":[1.0,0.5,0.6,0.01]}"#;
        assert!(serde_json::from_str::<NoiseSchedule>(bad).is_err());
        let bad0 = r#"{"kind":"linear","alpha_bar":[0.99,0.5,0.01]}"#;
        assert!(serde_json::from_str::<NoiseSchedule>(bad0).is_err());
        let s = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
    }

    #[test]
    fn add_noise_hand_values() {
        let s = quarter();
        let z = s.add_noise(&lat(&[1.0, 0.0]), &noise(&[0.0, 1.0]), 1).unwrap();
        assert!((z.data[[0, 0, 0]] - 0.5).abs() < 1e-12);
        assert!((z.data[[0, 0, 1]] - 0.75f64.sqrt()).abs() < 1e-12);
        assert!((z.data[[0, 0, 1]] - 0.86603).abs() < 1e-5);

        let z0 = lat(&[0.3, -2.0]);
        let same = s.add_noise(&z0, &noise(&[5.0, 7.0]), 0).unwrap();
        assert_eq!(same.data, z0.data);

        let only_noise = s.add_noise(&lat(&[0.0, 0.0]), &noise(&[2.0, -4.0]), 2).unwrap();
        let c = (1.0 - 0.01f64).sqrt();
        assert_eq!(only_noise.data, array![[[2.0 * c, -4.0 * c]]]);
    }

    #[test]
    fn predict_z0_hand_values_and_errors() {
        let s = quarter();
        let z0 = s
            .predict_z0(&lat(&[0.5, 0.75f64.sqrt()]), &noise(&[0.0, 1.0]), 1)
            .unwrap();
        assert!((z0.data[[0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!(z0.data[[0, 0, 1]].abs() < 1e-12);

        let zt = lat(&[0.4, -0.2]);
        let plain = s.predict_z0(&zt, &noise(&[0.0, 0.0]), 1).unwrap();
        assert_eq!(plain.data, &zt.data / 0.5);

        assert!(s.predict_z0(&zt, &noise(&[0.0, 0.0]), 0).is_err());
        assert!(s.predict_z0(&zt, &noise(&[0.0]), 1).is_err());
        assert!(s.add_noise(&zt, &noise(&[0.0, 0.0]), 3).is_err());
    }

    #[test]
    fn ddim_step_edges() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let zt = lat(&[0.7, -0.1, 0.3]);
        let e = noise(&[0.2, 0.5, -1.0]);
        let to_clean = s.ddim_step(&zt, &e, 4, 0).unwrap();
        assert_eq!(to_clean.data, s.predict_z0(&zt, &e, 4).unwrap().data);
        assert!(s.ddim_step(&zt, &e, 3, 3).is_err());
        assert!(s.ddim_step(&zt, &e, 3, 5).is_err());
        assert!(s.ddim_invert_step(&zt, &e, 5, 5).is_err());

        // the true noise of z_t moves the chain along its own trajectory
        let z0 = lat(&[1.0, -0.5, 0.25]);
        let z6 = s.add_noise(&z0, &e, 6).unwrap();
        let z2 = s.ddim_step(&z6, &e, 6, 2).unwrap();
        let expected = s.add_noise(&z0, &e, 2).unwrap();
        for (a, b) in z2.data.iter().zip(expected.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invert_step_zero_noise_scales_clean_latent() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let z0 = lat(&[1.0, 2.0]);
        let z = s.ddim_invert_step(&z0, &noise(&[0.0, 0.0]), 0, 3).unwrap();
        let c = s.alpha_bar(3).sqrt();
        assert_eq!(z.data, array![[[c, 2.0 * c]]]);
        assert_eq!(z.step, Some(3));
    }

    #[test]
    fn constant_noise_telescopes() {
        // With eps ≡ c, each step keeps (z − sqrt(1−ā)c)/sqrt(ā) invariant, so
        // the final clean latent equals the initial invariant.
        let s = make_schedule(100, ScheduleKind::Linear).unwrap();
        let grid = s.sampling_grid(20).unwrap();
        let c = noise(&[0.3, -1.2]);
        let z_start = lat(&[0.9, 0.1]);
        let top = *grid.last().unwrap();
        let mut z = z_start.clone();
        for w in grid.windows(2).rev() {
            z = s.ddim_step(&z, &c, w[1], w[0]).unwrap();
        }
        let a = s.alpha_bar(top);
        for i in 0..2 {
            let closed = (z_start.data[[0, 0, i]] - (1.0 - a).sqrt() * c.data[[0, 0, i]]) / a.sqrt();
            assert!((z.data[[0, 0, i]] - closed).abs() < 1e-9 * closed.abs().max(1.0));
        }
    }

    #[test]
    fn sampling_grid_is_strided() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let g = s.sampling_grid(50).unwrap();
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], 0);
        assert_eq!(g[1], 20);
        assert_eq!(g[50], 1000);
        assert!(s.sampling_grid(0).is_err());
        assert!(s.sampling_grid(1001).is_err());
    }

    #[test]
    fn non_finite_latent_rejected() {
        assert!(Latent::new(Array3::from_elem([1, 1, 2], f64::NAN)).is_err());
        assert!(NoiseSample::new(Array3::from_elem([1, 1, 2], f64::INFINITY)).is_err());
    }
}
