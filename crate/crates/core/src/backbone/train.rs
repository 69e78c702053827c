//! Noise-prediction training for the toy denoiser.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tiny::GradScope;
use super::{ConceptEmbedding, EmbeddingTable, TinyDenoiser, TinyWeights, NULL_TOKEN};
use crate::error::{Error, Result};
use crate::nn::round_f32;
use crate::optim::{Adam, AdamSettings};
use crate::par::Exec;
use crate::schedule::{Latent, NoiseSample};

/// A training image latent with the words describing it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLatent {
    pub latent: Latent,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of replacing the prompt by the null context, so the same
    /// network also learns the unconditional prediction.
    pub uncond_prob: f64,
    /// Probability of replacing each individual word by the null token.
    #[serde(default)]
    pub word_dropout: f64,
    pub context_len: usize,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    pub final_lr_fraction: f64,
    #[serde(default)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            uncond_prob: 0.15,
            word_dropout: 0.1,
            context_len: 4,
            final_lr_fraction: 0.1,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Average of the first `n` logged losses.
    pub fn head_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len()).max(1);
        self.losses.iter().take(n).sum::<f64>() / n as f64
    }

    /// Average of the last `n` logged losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.losses.len()).max(1);
        self.losses.iter().rev().take(n).sum::<f64>() / n as f64
    }
}

/// Mean squared error between `eps` and the prediction at `add_noise(z0, eps, t)`.
pub fn training_loss(
    b: &TinyDenoiser,
    z0: &Latent,
    t: usize,
    eps: &NoiseSample,
    v: &ConceptEmbedding,
) -> Result<f64> {
    use super::Denoiser;
    let z_t = b.schedule().add_noise(z0, eps, t)?;
    let (pred, _) = b.evaluate(&z_t, t, v, None)?;
    let n = pred.data.len() as f64;
    Ok((&pred.data - &eps.data).mapv(|d| d * d).sum() / n)
}

/// [`training_loss`] together with its gradient for every weight.
pub fn training_loss_grad(
    b: &TinyDenoiser,
    z0: &Latent,
    t: usize,
    eps: &NoiseSample,
    v: &ConceptEmbedding,
) -> Result<(f64, TinyWeights)> {
    use super::Denoiser;
    let z_t = b.schedule().add_noise(z0, eps, t)?;
    let (pred, trace) = b.forward_trace(&z_t.data, t, v, None)?;
    let n = pred.len() as f64;
    let diff: Array3<f64> = &pred - &eps.data;
    let loss = diff.mapv(|d| d * d).sum() / n;
    let d_out = diff.mapv(|d| 2.0 * d / n);
    let mut grads = b.weights.zeros_like();
    b.backward(&trace, &d_out, GradScope::All, Some(&mut grads));
    Ok((loss, grads))
}

struct Draw {
    index: usize,
    t: usize,
    eps: NoiseSample,
    uncond: bool,
    dropped: Vec<bool>,
}

/// Minimizes the noise-prediction objective with Adam over minibatches.
///
/// Weights are rounded to `f32` after each update so that checkpoints hold
/// them exactly.
pub fn train_backbone(
    b: &mut TinyDenoiser,
    table: &EmbeddingTable,
    data: &[LabeledLatent],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    use super::Denoiser;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(Error::invalid("learning rate and batch size must be positive"));
    }
    for d in data {
        let words: Vec<&str> = d.words.iter().map(String::as_str).collect();
        table.prompt(&words, cfg.context_len)?;
    }
    let null = table.null_embedding(cfg.context_len);
    let steps_t = b.schedule().steps();
    let shape = b.latent_shape();

    let sizes: Vec<usize> = b.weights.named().iter().map(|(_, a)| a.len()).collect();
    let mut opt = Adam::new(&sizes, AdamSettings::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let draws: Vec<Draw> = (0..cfg.batch_size)
            .map(|_| Draw {
                index: rng.gen_range(0..data.len()),
                t: rng.gen_range(1..=steps_t),
                eps: NoiseSample::gaussian(shape, &mut rng),
                uncond: rng.gen::<f64>() < cfg.uncond_prob,
                dropped: (0..cfg.context_len).map(|_| rng.gen::<f64>() < cfg.word_dropout).collect(),
            })
            .collect();
        let model: &TinyDenoiser = b;
        let results = cfg.exec.map(&draws, |d| {
            let v = if d.uncond {
                null.clone()
            } else {
                let words: Vec<&str> = data[d.index]
                    .words
                    .iter()
                    .zip(&d.dropped)
                    .map(|(w, &drop)| if drop { NULL_TOKEN } else { w.as_str() })
                    .collect();
                table.prompt(&words, cfg.context_len)?
            };
            training_loss_grad(model, &data[d.index].latent, d.t, &d.eps, &v)
        });
        let mut total = b.weights.zeros_like();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            total.add_scaled(&g, 1.0);
        }
        let scale = 1.0 / cfg.batch_size as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::non_finite("backbone training loss", step));
        }
        losses.push(loss);

        let progress = step as f64 / cfg.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let lr = cfg.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
        let grads: Vec<Vec<f64>> = total
            .named()
            .iter()
            .map(|(_, g)| g.iter().map(|x| x * scale).collect())
            .collect();
        let mut params = b.weights.named_mut();
        opt.update(
            params
                .iter_mut()
                .map(|(_, p)| p.as_slice_mut().expect("standard layout")),
            grads.iter().map(Vec::as_slice),
            lr,
        );
        for (_, p) in params.iter_mut() {
            round_f32(p.as_slice_mut().unwrap());
        }
        if step % 100 == 0 {
            log::debug!("train step {step}: loss {loss:.5} lr {lr:.2e}");
        }
    }
    Ok(TrainReport { losses })
}
