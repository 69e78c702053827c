//! Captured attention maps and replacement maps.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for an attention map to count as a distribution.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttn,
    Cross,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::SelfAttn => "self",
            AttentionKind::Cross => "cross",
        })
    }
}

/// Identifies one attention block of a backbone.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttentionSlot {
    pub layer: String,
    pub kind: AttentionKind,
}

impl AttentionSlot {
    pub fn new(layer: impl Into<String>, kind: AttentionKind) -> Self {
        AttentionSlot {
            layer: layer.into(),
            kind,
        }
    }
}

impl fmt::Display for AttentionSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.kind)
    }
}

/// Attention maps of one forward pass, keyed by block. Each map has shape
/// `(heads, queries, keys)`; cross maps have one key per context token.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionRecord {
    pub maps: BTreeMap<AttentionSlot, Array3<f64>>,
}

impl AttentionRecord {
    pub fn get(&self, slot: &AttentionSlot) -> Option<&Array3<f64>> {
        self.maps.get(slot)
    }

    pub fn slots(&self) -> impl Iterator<Item = &AttentionSlot> {
        self.maps.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Checks that every entry is in `[0, 1]` and rows sum to one.
    pub fn validate(&self) -> Result<()> {
        for (slot, m) in &self.maps {
            validate_map(slot, m)?;
        }
        Ok(())
    }

    /// Same slots with the same map shapes.
    pub fn congruent(&self, other: &AttentionRecord) -> bool {
        self.maps.len() == other.maps.len()
            && self
                .maps
                .iter()
                .zip(other.maps.iter())
                .all(|((sa, a), (sb, b))| sa == sb && a.shape() == b.shape())
    }

    /// Turns the whole record into an override replacing every map.
    pub fn into_override(self) -> AttentionOverride {
        AttentionOverride { maps: self.maps }
    }
}

pub(crate) fn validate_map(slot: &AttentionSlot, m: &Array3<f64>) -> Result<()> {
    if m.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::invalid(format!(
            "attention map {slot} has entries outside [0, 1]"
        )));
    }
    for row in m.lanes(Axis(2)) {
        if (row.sum() - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "attention map {slot} has a row summing to {}",
                row.sum()
            )));
        }
    }
    Ok(())
}

/// Replacement maps installed into a forward pass. Slots absent from the
/// override are computed normally.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionOverride {
    pub maps: BTreeMap<AttentionSlot, Array3<f64>>,
}

impl AttentionOverride {
    pub fn get(&self, slot: &AttentionSlot) -> Option<&Array3<f64>> {
        self.maps.get(slot)
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn insert(&mut self, slot: AttentionSlot, map: Array3<f64>) {
        self.maps.insert(slot, map);
    }

    /// Checks every replacement against the backbone's expected block shapes.
    pub fn check_against(&self, expected: &BTreeMap<AttentionSlot, [usize; 3]>) -> Result<()> {
        for (slot, m) in &self.maps {
            let Some(shape) = expected.get(slot) else {
                return Err(Error::invalid(format!(
                    "override targets unknown attention block {slot}"
                )));
            };
            if m.shape() != shape {
                return Err(Error::ShapeMismatch {
                    context: "attention override",
                    expected: shape.to_vec(),
                    got: m.shape().to_vec(),
                });
            }
            validate_map(slot, m)?;
        }
        Ok(())
    }
}
