//! Inversion of the source, the two denoising streams, and the end-to-end
//! translation built from them.

use serde::{Deserialize, Serialize};

use super::codec::LatentCodec;
use super::config::TranslationConfig;
use super::image::Image;
use super::metrics::{evaluate_metrics, mse, psnr, MetricBlock};
use crate::attention_control::{apply_control, MainBranch};
use crate::backbone::{ConceptEmbedding, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::guided_epsilon_pair;
use crate::inversion::{multi_concept_inversion, pivotal_tuning_inversion, PerStepEmbeddings};
use crate::schedule::Latent;

/// Unconditional DDIM inversion of `z_src` over an `steps`-step grid.
///
/// The prediction for the move `τ_k → τ_{k+1}` is evaluated at the current
/// latent with the target timestep label `τ_{k+1}`. Returns the final noise
/// latent and the trajectory `z_{τ_0}, …, z_{τ_n}`.
pub fn ddim_invert_full(
    z_src: &Latent,
    b: &dyn Denoiser,
    v_null: &ConceptEmbedding,
    steps: usize,
) -> Result<(Latent, Vec<Latent>)> {
    if steps == 0 {
        return Err(Error::invalid("inversion needs at least one step"));
    }
    let s = b.schedule();
    let grid = s.sampling_grid(steps)?;
    let mut z = z_src.clone().at_step(0);
    let mut trajectory = vec![z.clone()];
    for k in 0..steps {
        let (t, t_next) = (grid[k], grid[k + 1]);
        let (eps, _) = b.evaluate(&z, t_next, v_null, None)?;
        z = s.ddim_invert_step(&z, &eps, t, t_next)?;
        z.ensure_finite("ddim inversion", t_next)?;
        trajectory.push(z.clone());
    }
    Ok((z, trajectory))
}

/// Plain DDIM sampling with the unguided prediction for `v`.
pub fn ddim_sample(
    z_start: &Latent,
    b: &dyn Denoiser,
    v: &ConceptEmbedding,
    steps: usize,
) -> Result<Latent> {
    let s = b.schedule();
    let grid = s.sampling_grid(steps)?;
    let mut z = z_start.clone();
    for k in (1..=steps).rev() {
        let (eps, _) = b.evaluate(&z, grid[k], v, None)?;
        z = s.ddim_step(&z, &eps, grid[k], grid[k - 1])?;
        z.ensure_finite("ddim sampling", grid[k - 1])?;
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Model timestep of the step.
    pub t: usize,
    /// Attention blocks replaced in the main stream.
    pub replaced: usize,
    /// Kept content-inversion loss at this step.
    pub content_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualStreamOutput {
    pub z_tgt: Latent,
    pub z_rec: Latent,
    /// Both streams at every step, noisiest first: `(main, content)`.
    pub trajectory: Vec<(Latent, Latent)>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Runs the content stream (guided by the per-step source embeddings against
/// the null embedding) and the main stream (fusing source and reference, with
/// the content stream's attention maps injected) from the same start latent.
pub fn run_dual_stream(
    b: &dyn Denoiser,
    per_step: &PerStepEmbeddings,
    v_ref: &ConceptEmbedding,
    v_null: &ConceptEmbedding,
    cfg: &TranslationConfig,
) -> Result<DualStreamOutput> {
    cfg.validate()?;
    per_step.validate()?;
    if per_step.w != cfg.w {
        return Err(Error::invalid(format!(
            "content embeddings were optimized with w = {}, streams use w = {}",
            per_step.w, cfg.w
        )));
    }
    let n = per_step.steps();
    if per_step.grid != b.schedule().sampling_grid(n)? {
        return Err(Error::ArtifactMismatch(
            "per-step embeddings do not follow this backbone's sampling grid".into(),
        ));
    }
    let s = b.schedule();
    let mut z_main = per_step.start().clone();
    let mut z_content = z_main.clone();
    let mut trajectory = vec![(z_main.clone(), z_content.clone())];
    let mut diagnostics = Vec::with_capacity(n);
    for i in 0..n {
        let (t, t_prev, v_src) = per_step.step(i);
        let (eps_content, m_content) =
            guided_epsilon_pair(b, &z_content, t, v_src, v_null, cfg.w, None, cfg.exec)?;
        let main = MainBranch {
            v_src,
            v_ref,
            w: cfg.w,
            order: cfg.fusion,
        };
        let controlled = apply_control(
            b,
            &z_main,
            t,
            main,
            &m_content,
            n - i,
            n,
            &cfg.attention,
            cfg.exec,
        )?;
        z_content = s.ddim_step(&z_content, &eps_content, t, t_prev)?;
        z_main = s.ddim_step(&z_main, &controlled.epsilon, t, t_prev)?;
        z_content.ensure_finite("content stream", t_prev)?;
        z_main.ensure_finite("main stream", t_prev)?;
        trajectory.push((z_main.clone(), z_content.clone()));
        diagnostics.push(StepDiagnostics {
            t,
            replaced: controlled.replaced,
            content_loss: per_step.losses.get(i).map_or(f64::NAN, |l| l.kept),
        });
    }
    Ok(DualStreamOutput {
        z_tgt: z_main,
        z_rec: z_content,
        trajectory,
        diagnostics,
    })
}

/// Where the reference embedding of a translation comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference<'a> {
    /// Learn it from the reference image.
    Image(&'a Image),
    /// Use a given embedding, e.g. a cached one or plain word tokens.
    Embedding(&'a ConceptEmbedding, &'a Image),
}

impl Reference<'_> {
    fn image(&self) -> &Image {
        match self {
            Reference::Image(x) | Reference::Embedding(_, x) => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationResult {
    pub x_tgt: Image,
    /// Decoded content stream.
    pub x_rec: Image,
    pub v_ref: ConceptEmbedding,
    pub per_step: PerStepEmbeddings,
    pub diagnostics: Vec<StepDiagnostics>,
    /// `x_tgt` measured against the source and reference.
    pub metrics: MetricBlock,
    pub reconstruction_mse: f64,
    pub reconstruction_psnr: f64,
}

/// Everything a translation needs besides the images.
pub struct Translator<'a> {
    pub backbone: &'a dyn Denoiser,
    pub codec: &'a dyn LatentCodec,
    pub v_null: ConceptEmbedding,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

impl Translator<'_> {
    fn check_image(&self, x: &Image) -> Result<()> {
        let expected = self.codec.latent_shape(x.shape())?;
        if expected != self.backbone.latent_shape() {
            return Err(Error::ShapeMismatch {
                context: "image latent",
                expected: self.backbone.latent_shape().to_vec(),
                got: expected.to_vec(),
            });
        }
        Ok(())
    }

    /// Null rows that fill the context after `k` learned concept rows, so
    /// the reference has as many tokens as the source and cross-attention
    /// maps stay exchangeable between the two.
    fn concept_padding(&self, k: usize) -> Result<Option<ConceptEmbedding>> {
        let n = self.v_null.tokens();
        if k >= n {
            return Ok(None);
        }
        let rows = self.v_null.data.slice(ndarray::s![k.., ..]).to_owned();
        Ok(Some(ConceptEmbedding::new(rows, "padding")?))
    }

    /// Learns the reference embedding from an image.
    pub fn invert_concept(&self, x_ref: &Image, cfg: &TranslationConfig) -> Result<ConceptEmbedding> {
        self.check_image(x_ref)?;
        let z_ref = self.codec.encode(x_ref)?;
        let pad = self.concept_padding(cfg.hp.concept_tokens)?;
        let (v, report) =
            multi_concept_inversion(self.backbone, &z_ref, &cfg.hp, pad.as_ref(), cfg.seed, cfg.exec)?;
        if let Some(l) = report.losses.last() {
            log::info!("concept inversion: final loss {l:.4}");
        }
        Ok(v)
    }

    /// Inverts the source image to noise and optimizes its per-step
    /// embeddings.
    pub fn invert_content(&self, x_src: &Image, cfg: &TranslationConfig) -> Result<PerStepEmbeddings> {
        self.check_image(x_src)?;
        let z_src = self.codec.encode(x_src)?;
        let (z_start, _) = stage(
            "ddim inversion",
            ddim_invert_full(&z_src, self.backbone, &self.v_null, cfg.steps),
        )?;
        pivotal_tuning_inversion(
            self.backbone,
            &z_src,
            &z_start,
            cfg.steps,
            cfg.w,
            &cfg.hp,
            &self.v_null,
            &self.v_null,
        )
    }

    /// Content stream only, scored against the source.
    pub fn reconstruct(&self, x_src: &Image, cfg: &TranslationConfig) -> Result<(Image, f64)> {
        cfg.validate()?;
        let per_step = stage("content inversion", self.invert_content(x_src, cfg))?;
        let x = self.codec.decode(per_step.end())?;
        let p = psnr(&x, x_src)?;
        Ok((x, p))
    }

    /// Full translation from already inverted parts.
    pub fn translate_from(
        &self,
        x_src: &Image,
        x_ref: &Image,
        per_step: PerStepEmbeddings,
        v_ref: ConceptEmbedding,
        cfg: &TranslationConfig,
    ) -> Result<TranslationResult> {
        let streams = stage(
            "dual-stream denoising",
            run_dual_stream(self.backbone, &per_step, &v_ref, &self.v_null, cfg),
        )?;
        let x_tgt = self.codec.decode(&streams.z_tgt)?;
        let x_rec = self.codec.decode(&streams.z_rec)?;
        let metrics = evaluate_metrics(&x_tgt, x_src, Some(x_ref))?;
        Ok(TranslationResult {
            reconstruction_mse: mse(&x_rec, x_src)?,
            reconstruction_psnr: psnr(&x_rec, x_src)?,
            x_tgt,
            x_rec,
            v_ref,
            per_step,
            diagnostics: streams.diagnostics,
            metrics,
        })
    }

    /// Concept inversion, content inversion and dual-stream denoising.
    pub fn translate(
        &self,
        x_src: &Image,
        reference: Reference<'_>,
        cfg: &TranslationConfig,
    ) -> Result<TranslationResult> {
        cfg.validate()?;
        let x_ref = reference.image();
        self.check_image(x_src)?;
        self.check_image(x_ref)?;
        let v_ref = match reference {
            Reference::Image(x) => stage("concept inversion", self.invert_concept(x, cfg))?,
            Reference::Embedding(v, _) => v.clone(),
        };
        let per_step = stage("content inversion", self.invert_content(x_src, cfg))?;
        self.translate_from(x_src, x_ref, per_step, v_ref, cfg)
    }
}
