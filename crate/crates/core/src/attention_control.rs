//! Soft replacement of the main branch's attention maps by the content
//! branch's maps during part of the denoising trajectory.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, AttentionOverride, AttentionRecord, AttentionSlot};
use crate::backbone::{ConceptEmbedding, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{require_guidance, FusionOrder};
use crate::par::Exec;
use crate::schedule::{Latent, NoiseSample};

/// Where along the trajectory the replaced steps sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlWindow {
    /// The first, high-noise denoising steps.
    #[default]
    Early,
    /// The last, low-noise denoising steps.
    Late,
}

impl std::str::FromStr for ControlWindow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(ControlWindow::Early),
            "late" => Ok(ControlWindow::Late),
            other => Err(Error::invalid(format!("unknown control window `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionControlConfig {
    /// Fraction of denoising steps whose cross-attention maps are replaced.
    pub cross_ratio: f64,
    /// Fraction of denoising steps whose self-attention maps are replaced.
    pub self_ratio: f64,
    /// Restricts replacement to these layers; `None` means all layers.
    #[serde(default)]
    pub layer_mask: Option<BTreeSet<String>>,
    #[serde(default)]
    pub window: ControlWindow,
}

impl Default for AttentionControlConfig {
    fn default() -> Self {
        AttentionControlConfig {
            cross_ratio: 0.2,
            self_ratio: 1.0,
            layer_mask: None,
            window: ControlWindow::Early,
        }
    }
}

impl AttentionControlConfig {
    pub fn with_ratios(cross_ratio: f64, self_ratio: f64) -> Result<Self> {
        let cfg = AttentionControlConfig {
            cross_ratio,
            self_ratio,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("cross_ratio", self.cross_ratio), ("self_ratio", self.self_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} = {r} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn ratio(&self, kind: AttentionKind) -> f64 {
        match kind {
            AttentionKind::Cross => self.cross_ratio,
            AttentionKind::SelfAttn => self.self_ratio,
        }
    }

    /// Number of replaced steps for `kind` out of `total` denoising steps.
    pub fn replaced_steps(&self, kind: AttentionKind, total: usize) -> usize {
        ((self.ratio(kind) * total as f64).round() as usize).min(total)
    }

    /// Whether maps of `kind` are replaced at denoising step `t`, where `t`
    /// runs from `total` (pure noise) down to 1.
    pub fn replaces(&self, kind: AttentionKind, t: usize, total: usize) -> bool {
        let n = self.replaced_steps(kind, total);
        match self.window {
            ControlWindow::Early => t > total - n,
            ControlWindow::Late => t <= n,
        }
    }

    fn layer_selected(&self, layer: &str) -> bool {
        self.layer_mask.as_ref().is_none_or(|m| m.contains(layer))
    }

    /// Slots replaced at step `t`, given the slots a backbone exposes.
    pub fn active_slots<'a>(
        &'a self,
        slots: impl IntoIterator<Item = &'a AttentionSlot> + 'a,
        t: usize,
        total: usize,
    ) -> impl Iterator<Item = &'a AttentionSlot> + 'a {
        slots
            .into_iter()
            .filter(move |s| self.layer_selected(&s.layer) && self.replaces(s.kind, t, total))
    }
}

fn check_step(t: usize, total: usize) -> Result<()> {
    if t == 0 || t > total {
        return Err(Error::OutOfRange {
            context: "attention control step",
            index: t,
            max: total,
        });
    }
    Ok(())
}

/// Picks, per block, the content map where replacement is active at step `t`
/// and the main map elsewhere.
pub fn soft_attention_control(
    m_main: &AttentionRecord,
    m_content: &AttentionRecord,
    t: usize,
    total: usize,
    cfg: &AttentionControlConfig,
) -> Result<AttentionOverride> {
    cfg.validate()?;
    check_step(t, total)?;
    if !m_main.congruent(m_content) {
        return Err(Error::invalid(
            "main and content attention records are not congruent",
        ));
    }
    let mut out = AttentionOverride::default();
    for (slot, main) in &m_main.maps {
        let chosen = if cfg.layer_selected(&slot.layer) && cfg.replaces(slot.kind, t, total) {
            &m_content.maps[slot]
        } else {
            main
        };
        out.insert(slot.clone(), chosen.clone());
    }
    Ok(out)
}

/// Main-branch inputs for one controlled prediction.
#[derive(Debug, Clone, Copy)]
pub struct MainBranch<'a> {
    pub v_src: &'a ConceptEmbedding,
    pub v_ref: &'a ConceptEmbedding,
    pub w: f64,
    pub order: FusionOrder,
}

/// Output of [`apply_control`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledPrediction {
    pub epsilon: NoiseSample,
    /// Maps actually used by the source-conditioned pass.
    pub record: AttentionRecord,
    /// Number of blocks whose maps were replaced.
    pub replaced: usize,
}

/// Evaluates the main branch's fused prediction at step `t` with the content
/// branch's maps installed wherever the control schedule replaces them.
///
/// Blocks that are not replaced keep the map the main branch computes itself,
/// which is exactly what [`soft_attention_control`] selects for them.
#[allow(clippy::too_many_arguments)]
pub fn apply_control(
    b: &dyn Denoiser,
    z_t: &Latent,
    t_model: usize,
    main: MainBranch<'_>,
    m_content: &AttentionRecord,
    t: usize,
    total: usize,
    cfg: &AttentionControlConfig,
    exec: Exec,
) -> Result<ControlledPrediction> {
    cfg.validate()?;
    check_step(t, total)?;
    require_guidance(main.w)?;
    let expected = b.attention_shapes(main.v_src.tokens());
    let mut replace = AttentionOverride::default();
    for slot in cfg.active_slots(expected.keys(), t, total) {
        let map = m_content.get(slot).ok_or_else(|| {
            Error::invalid(format!("content record lacks attention block {slot}"))
        })?;
        replace.insert(slot.clone(), map.clone());
    }
    replace.check_against(&expected)?;
    let replaced = replace.len();
    let install = (!replace.is_empty()).then_some(&replace);
    let (src, other) = exec.join(
        || b.evaluate(z_t, t_model, main.v_src, install),
        || b.evaluate(z_t, t_model, main.v_ref, None),
    );
    let (eps_src, record) = src?;
    let (eps_ref, _) = other?;
    Ok(ControlledPrediction {
        epsilon: main.order.fuse(&eps_src, &eps_ref, main.w)?,
        record,
        replaced,
    })
}
