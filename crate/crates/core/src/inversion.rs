//! Embedding optimization against a frozen backbone: per-timestep source
//! embeddings that pin the denoising trajectory to a source latent, and
//! multi-token concept embeddings learned from a single reference latent.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ConceptEmbedding, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{fuse_epsilon, require_guidance};
use crate::nn::round_f32;
use crate::optim::{Adam, AdamSettings};
use crate::par::Exec;
use crate::schedule::{Latent, NoiseSample};

/// Learning rate as a function of the global optimization step `s ≥ 1`:
/// `1e-2 · s / 5000`.
pub fn pti_learning_rate(s: u64) -> f64 {
    1e-2 * s as f64 / 5000.0
}

/// Step-size rule for the per-timestep optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PtiLrSchedule {
    /// [`pti_learning_rate`] with `s` the global step counter, so the rate
    /// grows as optimization proceeds.
    Growing,
    /// The mirror image, `1e-2 · (5001 − s) / 5000`, floored at its value
    /// for `s = 5000`.
    Decaying,
    /// [`pti_learning_rate`] with `s` counting the steps still left in the
    /// budget, so the rate falls from `2e-3` to `2e-6` over 1000 steps.
    #[default]
    Remaining,
    Constant { lr: f64 },
}

impl PtiLrSchedule {
    /// Rate for global step `s` (1-based) out of `budget` total steps.
    pub fn lr(self, s: u64, budget: u64) -> f64 {
        match self {
            PtiLrSchedule::Growing => pti_learning_rate(s),
            PtiLrSchedule::Remaining => pti_learning_rate((budget + 1).saturating_sub(s).max(1)),
            PtiLrSchedule::Decaying => pti_learning_rate(5001u64.saturating_sub(s).max(1)),
            PtiLrSchedule::Constant { lr } => lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionHyperparams {
    /// Total optimization steps across all timesteps of the content
    /// inversion, split evenly.
    pub pti_total_steps: usize,
    /// Overrides the per-timestep count derived from `pti_total_steps`.
    #[serde(default)]
    pub pti_inner_steps: Option<usize>,
    #[serde(default)]
    pub pti_lr: PtiLrSchedule,
    pub mci_steps: usize,
    pub mci_lr: f64,
    /// Noise draws averaged per concept-inversion step.
    pub mci_batch: usize,
    /// Number of concept tokens learned for the reference.
    pub concept_tokens: usize,
    pub lambda_rec: f64,
    pub mci_init_std: f64,
}

impl Default for InversionHyperparams {
    fn default() -> Self {
        InversionHyperparams {
            pti_total_steps: 1000,
            pti_inner_steps: None,
            pti_lr: PtiLrSchedule::Remaining,
            mci_steps: 200,
            mci_lr: 5e-4,
            mci_batch: 4,
            concept_tokens: 3,
            lambda_rec: 1.0,
            mci_init_std: 0.02,
        }
    }
}

impl InversionHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.concept_tokens == 0 {
            return Err(Error::invalid("concept token count must be at least 1"));
        }
        if self.mci_batch == 0 {
            return Err(Error::invalid("concept batch must be at least 1"));
        }
        if !(self.mci_lr > 0.0 && self.mci_lr.is_finite()) {
            return Err(Error::invalid("concept learning rate must be positive"));
        }
        if !(self.lambda_rec >= 0.0 && self.lambda_rec.is_finite()) {
            return Err(Error::invalid("reconstruction weight must be non-negative"));
        }
        if !(self.mci_init_std > 0.0 && self.mci_init_std.is_finite()) {
            return Err(Error::invalid("concept init scale must be positive"));
        }
        if let PtiLrSchedule::Constant { lr } = self.pti_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid("content learning rate must be positive"));
            }
        }
        Ok(())
    }

    /// Inner optimization steps per timestep for an `n`-step trajectory.
    pub fn inner_steps(&self, n: usize) -> usize {
        self.pti_inner_steps
            .unwrap_or_else(|| (self.pti_total_steps as f64 / n.max(1) as f64).round() as usize)
    }
}

/// Loss values of the optimization at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Loss at every iterate, starting with the initialization.
    pub trace: Vec<f64>,
    /// Loss of the embedding kept for this timestep.
    pub kept: f64,
}

impl StepLosses {
    pub fn initial(&self) -> f64 {
        self.trace[0]
    }
}

/// Source embeddings for every denoising step together with the latent
/// trajectory they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct PerStepEmbeddings {
    /// Model timesteps `τ_0 = 0 < … < τ_n`.
    pub grid: Vec<usize>,
    /// Embedding for step `τ_k → τ_{k−1}`, stored in denoising order
    /// (`k = n` first).
    pub embeddings: Vec<ConceptEmbedding>,
    /// `z` at `τ_n, τ_{n−1}, …, τ_0`.
    pub trajectory: Vec<Latent>,
    /// Guidance scale the embeddings were optimized under.
    pub w: f64,
    pub losses: Vec<StepLosses>,
}

impl PerStepEmbeddings {
    pub fn steps(&self) -> usize {
        self.embeddings.len()
    }

    pub fn start(&self) -> &Latent {
        &self.trajectory[0]
    }

    pub fn end(&self) -> &Latent {
        self.trajectory.last().expect("trajectory is never empty")
    }

    /// Model timestep and embedding of the `i`-th denoising step (`i = 0` is
    /// the noisiest).
    pub fn step(&self, i: usize) -> (usize, usize, &ConceptEmbedding) {
        let n = self.embeddings.len();
        (self.grid[n - i], self.grid[n - i - 1], &self.embeddings[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.embeddings.len();
        if n == 0 || self.grid.len() != n + 1 || self.trajectory.len() != n + 1 {
            return Err(Error::invalid("per-step embeddings are inconsistent in length"));
        }
        if self.grid[0] != 0 || self.grid.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::invalid("per-step grid must increase from 0"));
        }
        if self.embeddings.iter().any(|e| e.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("per-step embedding is not finite"));
        }
        Ok(())
    }

    /// Re-runs the content trajectory with the stored embeddings.
    pub fn replay(&self, b: &dyn Denoiser, v_null: &ConceptEmbedding) -> Result<Vec<Latent>> {
        self.validate()?;
        let mut z = self.start().clone();
        let mut out = vec![z.clone()];
        for i in 0..self.steps() {
            let (t, t_prev, v) = self.step(i);
            let eps = guided(b, &z, t, v, v_null, self.w)?;
            z = b.schedule().ddim_step(&z, &eps, t, t_prev)?;
            out.push(z.clone());
        }
        Ok(out)
    }
}

fn guided(
    b: &dyn Denoiser,
    z: &Latent,
    t: usize,
    v: &ConceptEmbedding,
    v_null: &ConceptEmbedding,
    w: f64,
) -> Result<NoiseSample> {
    let (c, _) = b.evaluate(z, t, v, None)?;
    let (u, _) = b.evaluate(z, t, v_null, None)?;
    fuse_epsilon(&c, &u, w)
}

fn mean_sq(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    (a - b).mapv(|d| d * d).sum() / a.len() as f64
}

/// Content inversion: for each step from `τ_n` down to `τ_1`, optimizes the
/// source embedding so that the guided clean-latent estimate at the current
/// latent matches `z_src`, then advances the latent by a guided DDIM step
/// with the optimized embedding.
///
/// Each timestep starts from the previous timestep's embedding and a fresh
/// optimizer state; the step counter of the learning-rate rule is global.
/// The kept embedding is the best iterate seen, so a timestep never ends
/// with a higher loss than it started with.
#[allow(clippy::too_many_arguments)]
pub fn pivotal_tuning_inversion(
    b: &dyn Denoiser,
    z_src: &Latent,
    z_start: &Latent,
    steps: usize,
    w: f64,
    hp: &InversionHyperparams,
    v_init: &ConceptEmbedding,
    v_null: &ConceptEmbedding,
) -> Result<PerStepEmbeddings> {
    hp.validate()?;
    require_guidance(w)?;
    if v_init.tokens() != v_null.tokens() {
        return Err(Error::invalid("initial and null embeddings differ in token count"));
    }
    let s = b.schedule();
    let grid = s.sampling_grid(steps)?;
    let inner = hp.inner_steps(steps);
    let mut z = z_start.clone();
    z.ensure_finite("content inversion", steps)?;
    let mut v = v_init.clone();
    let mut embeddings = Vec::with_capacity(steps);
    let mut trajectory = vec![z.clone()];
    let mut losses = Vec::with_capacity(steps);
    let mut global: u64 = 0;

    for k in (1..=steps).rev() {
        let (t, t_prev) = (grid[k], grid[k - 1]);
        let a = s.alpha_bar(t);
        let c = (1.0 - a).sqrt() / a.sqrt();
        let (eps_null, _) = b.evaluate(&z, t, v_null, None)?;
        let fused_z0 = |eps_v: &NoiseSample| -> Array3<f64> {
            let eps = w * &eps_v.data + (1.0 - w) * &eps_null.data;
            (&z.data - &(eps * (1.0 - a).sqrt())) / a.sqrt()
        };
        let n = z.data.len() as f64;
        let upstream = |eps_v: &NoiseSample| -> Array3<f64> {
            (fused_z0(eps_v) - &z_src.data) * (-2.0 * c * w / n)
        };

        let mut opt = Adam::new(&[v.data.len()], AdamSettings::default());
        let mut trace = Vec::with_capacity(inner + 1);
        let mut best = (f64::INFINITY, v.clone());
        for _ in 0..inner {
            let (eps_v, grad) = b.evaluate_with_grad(&z, t, &v, &upstream)?;
            let loss = mean_sq(&fused_z0(&eps_v), &z_src.data);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::non_finite("content inversion", t));
            }
            trace.push(loss);
            if loss < best.0 {
                best = (loss, v.clone());
            }
            global += 1;
            let g = grad.as_slice().expect("standard layout").to_vec();
            opt.update(
                [v.data.as_slice_mut().expect("standard layout")],
                [g.as_slice()],
                hp.pti_lr.lr(global, (inner * steps) as u64),
            );
            round_f32(v.data.as_slice_mut().expect("standard layout"));
        }
        let (eps_v, _) = b.evaluate(&z, t, &v, None)?;
        let loss = mean_sq(&fused_z0(&eps_v), &z_src.data);
        if !loss.is_finite() {
            return Err(Error::non_finite("content inversion", t));
        }
        trace.push(loss);
        let (kept, eps_v) = if loss <= best.0 {
            (loss, eps_v)
        } else {
            v = best.1;
            (best.0, b.evaluate(&z, t, &v, None)?.0)
        };
        let eps = fuse_epsilon(&eps_v, &eps_null, w)?;
        z = s.ddim_step(&z, &eps, t, t_prev)?;
        z.ensure_finite("content inversion", t)?;
        log::debug!("content inversion t={t}: loss {:.3e} -> {kept:.3e}", trace[0]);
        embeddings.push(v.clone());
        trajectory.push(z.clone());
        losses.push(StepLosses { trace, kept });
    }
    Ok(PerStepEmbeddings {
        grid,
        embeddings,
        trajectory,
        w,
        losses,
    })
}

/// Concept loss terms for one draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConceptLoss {
    /// Noise-prediction error.
    pub ldm: f64,
    /// Clean-latent reconstruction error.
    pub rec: f64,
    pub total: f64,
}

/// `L_ldm + λ·L_rec` at `z_t = add_noise(z_ref, ε, t)` and its gradient with
/// respect to the embedding rows.
pub fn concept_loss_grad(
    b: &dyn Denoiser,
    z_ref: &Latent,
    v: &ConceptEmbedding,
    t: usize,
    eps: &NoiseSample,
    lambda_rec: f64,
) -> Result<(ConceptLoss, Array2<f64>)> {
    let s = b.schedule();
    if t == 0 {
        return Err(Error::invalid("concept loss requires t >= 1"));
    }
    let z_t = s.add_noise(z_ref, eps, t)?;
    let a = s.alpha_bar(t);
    let c = (1.0 - a).sqrt() / a.sqrt();
    let n = z_ref.data.len() as f64;
    let z0_err = |pred: &NoiseSample| -> Array3<f64> {
        (&z_t.data - &(&pred.data * (1.0 - a).sqrt())) / a.sqrt() - &z_ref.data
    };
    let upstream = |pred: &NoiseSample| -> Array3<f64> {
        (&pred.data - &eps.data) * (2.0 / n) + z0_err(pred) * (-2.0 * c * lambda_rec / n)
    };
    let (pred, grad) = b.evaluate_with_grad(&z_t, t, v, &upstream)?;
    let ldm = mean_sq(&pred.data, &eps.data);
    let rec = z0_err(&pred).mapv(|d| d * d).sum() / n;
    Ok((
        ConceptLoss {
            ldm,
            rec,
            total: ldm + lambda_rec * rec,
        },
        grad,
    ))
}

/// Value of [`concept_loss_grad`] without the gradient.
pub fn concept_loss(
    b: &dyn Denoiser,
    z_ref: &Latent,
    v: &ConceptEmbedding,
    t: usize,
    eps: &NoiseSample,
    lambda_rec: f64,
) -> Result<ConceptLoss> {
    let s = b.schedule();
    if t == 0 {
        return Err(Error::invalid("concept loss requires t >= 1"));
    }
    let z_t = s.add_noise(z_ref, eps, t)?;
    let (pred, _) = b.evaluate(&z_t, t, v, None)?;
    let ldm = mean_sq(&pred.data, &eps.data);
    let rec = mean_sq(&s.predict_z0(&z_t, &pred, t)?.data, &z_ref.data);
    Ok(ConceptLoss {
        ldm,
        rec,
        total: ldm + lambda_rec * rec,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Concept inversion: learns `K` embedding rows for the reference latent by
/// descending the noise-prediction and reconstruction losses over random
/// timesteps and noise. The backbone is only read.
///
/// `padding` rows, if any, follow the learned rows in the context (like the
/// filler tokens of a prompt) and stay fixed; the returned embedding
/// includes them.
pub fn multi_concept_inversion(
    b: &dyn Denoiser,
    z_ref: &Latent,
    hp: &InversionHyperparams,
    padding: Option<&ConceptEmbedding>,
    seed: u64,
    exec: Exec,
) -> Result<(ConceptEmbedding, ConceptReport)> {
    hp.validate()?;
    let k = hp.concept_tokens;
    let mut v = ConceptEmbedding::random(k, b.embed_dim(), hp.mci_init_std, seed, "concept")?;
    if let Some(pad) = padding {
        if pad.dim() != b.embed_dim() {
            return Err(Error::ShapeMismatch {
                context: "concept padding",
                expected: vec![pad.tokens(), b.embed_dim()],
                got: vec![pad.tokens(), pad.dim()],
            });
        }
        let data = ndarray::concatenate(ndarray::Axis(0), &[v.data.view(), pad.data.view()])
            .expect("widths agree");
        v = ConceptEmbedding::new(data, "concept")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d63_6900);
    let mut opt = Adam::new(&[v.data.len()], AdamSettings::default());
    let total_t = b.schedule().steps();
    let shape = b.latent_shape();
    let mut losses = Vec::with_capacity(hp.mci_steps);
    for step in 0..hp.mci_steps {
        let draws: Vec<(usize, NoiseSample)> = (0..hp.mci_batch)
            .map(|_| (rng.gen_range(1..=total_t), NoiseSample::gaussian(shape, &mut rng)))
            .collect();
        let results = exec.map(&draws, |(t, eps)| concept_loss_grad(b, z_ref, &v, *t, eps, hp.lambda_rec));
        let mut grad = Array2::<f64>::zeros(v.data.raw_dim());
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l.total / hp.mci_batch as f64;
            grad.scaled_add(1.0 / hp.mci_batch as f64, &g);
        }
        grad.slice_mut(ndarray::s![k.., ..]).fill(0.0);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::non_finite("concept inversion", step));
        }
        losses.push(loss);
        let g = grad.as_slice().expect("standard layout").to_vec();
        opt.update([v.data.as_slice_mut().expect("standard layout")], [g.as_slice()], hp.mci_lr);
        round_f32(v.data.as_slice_mut().expect("standard layout"));
    }
    Ok((v, ConceptReport { losses }))
}
