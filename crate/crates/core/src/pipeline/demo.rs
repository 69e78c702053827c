//! The toy backbone recipe and the desk-scale measurements on the fixed
//! shape/texture pair, shared by the CLI `demo` and the acceptance tests.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::codec::IdentityCodec;
use super::config::TranslationConfig;
use super::metrics::{psnr, structure_iou, texture_distance};
use super::toy::{toy_pair, training_set};
use super::translate::{ddim_invert_full, ddim_sample, Translator};
use crate::backbone::{train_backbone, EmbeddingTable, TinyConfig, TinyDenoiser, TrainConfig, TrainReport, NULL_TOKEN, TOY_WORDS};
use crate::error::Result;
use crate::schedule::{make_schedule, ScheduleKind};

/// Raw tokens used in place of the learned reference embedding when MCI is
/// ablated: the texture word alone.
pub const ABLATION_TOKENS: &[&str] = &[NULL_TOKEN, "striped"];

/// Everything needed to reproduce the toy backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRecipe {
    pub samples: usize,
    pub data_seed: u64,
    pub model_seed: u64,
    pub table_seed: u64,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub model: TinyConfig,
    pub train: TrainConfig,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        ToyRecipe {
            samples: 2000,
            data_seed: 7,
            model_seed: 0,
            table_seed: 1,
            timesteps: 1000,
            schedule: ScheduleKind::Linear,
            model: TinyConfig::default(),
            train: TrainConfig {
                steps: 6000,
                lr: 2e-3,
                batch_size: 16,
                ..TrainConfig::default()
            },
        }
    }
}

/// Trains a denoiser on rendered toy shapes with the identity codec.
pub fn train_toy_backbone(recipe: &ToyRecipe) -> Result<(TinyDenoiser, EmbeddingTable, TrainReport)> {
    let schedule = make_schedule(recipe.timesteps, recipe.schedule)?;
    let mut b = TinyDenoiser::new(recipe.model.clone(), schedule, recipe.model_seed)?;
    let table = EmbeddingTable::seeded(TOY_WORDS, recipe.model.embed_dim, recipe.table_seed)?;
    let data = training_set(
        recipe.samples,
        recipe.data_seed,
        &IdentityCodec,
        recipe.model.height,
        recipe.model.width,
    )?;
    let report = train_backbone(&mut b, &table, &data, &recipe.train)?;
    Ok((b, table, report))
}

/// Measurements on the fixed pair: the full method and the three ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    /// Unconditional DDIM round trip of the source.
    pub baseline_psnr: f64,
    /// Content stream with content inversion.
    pub content_psnr: f64,
    /// Content stream with zero content-inversion steps.
    pub no_pti_psnr: f64,
    pub structure_iou: f64,
    pub no_ac_structure_iou: f64,
    pub edge_overlap: f64,
    /// Texture distance of the source itself to the reference.
    pub source_texture_distance: f64,
    pub texture_distance: f64,
    pub no_mci_texture_distance: f64,
    /// Wall-clock seconds of the full translation (both inversions included).
    pub translate_seconds: f64,
}

impl DeskReport {
    /// Relative texture-distance reduction against the raw-token ablation.
    pub fn texture_reduction(&self) -> f64 {
        1.0 - self.texture_distance / self.no_mci_texture_distance
    }
}

/// Runs the full translation of the toy pair and the three ablations.
pub fn desk_scale_report(
    tr: &Translator<'_>,
    table: &EmbeddingTable,
    cfg: &TranslationConfig,
) -> Result<DeskReport> {
    let (s, r) = toy_pair();
    let [_, h, w] = tr.backbone.latent_shape();
    let x_src = s.render(h, w)?;
    let x_ref = r.render(h, w)?;

    let started = Instant::now();
    let v_ref = tr.invert_concept(&x_ref, cfg)?;
    let per_step = tr.invert_content(&x_src, cfg)?;
    let full = tr.translate_from(&x_src, &x_ref, per_step.clone(), v_ref.clone(), cfg)?;
    let translate_seconds = started.elapsed().as_secs_f64();

    let z_src = tr.codec.encode(&x_src)?;
    let (z_t, _) = ddim_invert_full(&z_src, tr.backbone, &tr.v_null, cfg.steps)?;
    let x_base = tr.codec.decode(&ddim_sample(&z_t, tr.backbone, &tr.v_null, cfg.steps)?)?;

    let mut no_pti = cfg.clone();
    no_pti.hp.pti_inner_steps = Some(0);
    let (_, no_pti_psnr) = tr.reconstruct(&x_src, &no_pti)?;

    let mut no_ac = cfg.clone();
    no_ac.attention.cross_ratio = 0.0;
    no_ac.attention.self_ratio = 0.0;
    let r_ac = tr.translate_from(&x_src, &x_ref, per_step.clone(), v_ref, &no_ac)?;

    let raw = table.prompt(ABLATION_TOKENS, tr.v_null.tokens())?;
    let r_mci = tr.translate_from(&x_src, &x_ref, per_step, raw, cfg)?;

    Ok(DeskReport {
        baseline_psnr: psnr(&x_base, &x_src)?,
        content_psnr: full.reconstruction_psnr,
        no_pti_psnr,
        structure_iou: full.metrics.structure_iou,
        no_ac_structure_iou: structure_iou(&r_ac.x_tgt, &x_src)?,
        edge_overlap: full.metrics.edge_overlap,
        source_texture_distance: texture_distance(&x_src, &x_ref)?,
        texture_distance: texture_distance(&full.x_tgt, &x_ref)?,
        no_mci_texture_distance: texture_distance(&r_mci.x_tgt, &x_ref)?,
        translate_seconds,
    })
}
