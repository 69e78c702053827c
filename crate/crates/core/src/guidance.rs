//! Noise-space combination of conditional predictions.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionOverride, AttentionRecord};
use crate::backbone::{ConceptEmbedding, Denoiser};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::schedule::{Latent, NoiseSample};

/// Guidance scale shared by every fused prediction of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { w: 4.0 }
    }
}

impl GuidanceConfig {
    pub fn new(w: f64) -> Result<Self> {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::invalid(format!("guidance scale {w} must be finite and >= 0")));
        }
        Ok(GuidanceConfig { w })
    }
}

/// Which prediction of the main branch receives the weight `w`.
///
/// `SourceWeighted` is `w·ε(v_src) + (1 − w)·ε(v_ref)`; `ReferenceWeighted` is
/// `w·ε(v_ref) + (1 − w)·ε(v_src)`, i.e. guidance from the source towards the
/// reference concept. The attention override always targets the source pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionOrder {
    SourceWeighted,
    #[default]
    ReferenceWeighted,
}

impl std::str::FromStr for FusionOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source-weighted" => Ok(FusionOrder::SourceWeighted),
            "reference-weighted" => Ok(FusionOrder::ReferenceWeighted),
            other => Err(Error::invalid(format!("unknown fusion order `{other}`"))),
        }
    }
}

impl FusionOrder {
    /// Fuses the source and reference predictions.
    pub fn fuse(self, eps_src: &NoiseSample, eps_ref: &NoiseSample, w: f64) -> Result<NoiseSample> {
        match self {
            FusionOrder::SourceWeighted => fuse_epsilon(eps_src, eps_ref, w),
            FusionOrder::ReferenceWeighted => fuse_epsilon(eps_ref, eps_src, w),
        }
    }
}

pub(crate) fn require_guidance(w: f64) -> Result<()> {
    if !w.is_finite() || w < 1.0 {
        return Err(Error::invalid(format!("guidance scale {w} must be finite and >= 1")));
    }
    Ok(())
}

/// `w·a + (1 − w)·b`.
pub fn fuse_epsilon(a: &NoiseSample, b: &NoiseSample, w: f64) -> Result<NoiseSample> {
    if !w.is_finite() {
        return Err(Error::invalid("fusion weight must be finite"));
    }
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "fuse_epsilon",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let data = Zip::from(&a.data)
        .and(&b.data)
        .map_collect(|&x, &y| w * x + (1.0 - w) * y);
    Ok(NoiseSample::raw(data))
}

/// Classifier-free guidance: fuses the `v`-conditioned prediction with the
/// unconditional one.
pub fn cfg_epsilon(
    b: &dyn Denoiser,
    z_t: &Latent,
    t: usize,
    v: &ConceptEmbedding,
    v_null: &ConceptEmbedding,
    w: f64,
) -> Result<NoiseSample> {
    require_guidance(w)?;
    let (cond, _) = b.evaluate(z_t, t, v, None)?;
    let (uncond, _) = b.evaluate(z_t, t, v_null, None)?;
    fuse_epsilon(&cond, &uncond, w)
}

/// Evaluates `v_src` and `v_other` at the same state and fuses them as
/// `w·ε(v_src) + (1 − w)·ε(v_other)`.
///
/// The returned record comes from the `v_src` pass. `replace`, when given, is
/// installed into the `v_src` pass only.
pub fn guided_epsilon_pair(
    b: &dyn Denoiser,
    z_t: &Latent,
    t: usize,
    v_src: &ConceptEmbedding,
    v_other: &ConceptEmbedding,
    w: f64,
    replace: Option<&AttentionOverride>,
    exec: Exec,
) -> Result<(NoiseSample, AttentionRecord)> {
    require_guidance(w)?;
    let (src, other) = exec.join(
        || b.evaluate(z_t, t, v_src, replace),
        || b.evaluate(z_t, t, v_other, None),
    );
    let (eps_src, record) = src?;
    let (eps_other, _) = other?;
    Ok((fuse_epsilon(&eps_src, &eps_other, w)?, record))
}
