//! Training objectives beyond detection: temporal consistency, confidence
//! supervision and the weighted total.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Weights of the detection, contrastive, temporal and confidence terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub detection: f64,
    pub contrastive: f64,
    pub temporal: f64,
    pub confidence: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            detection: 1.0,
            contrastive: 0.1,
            temporal: 0.2,
            confidence: 0.05,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.detection, self.contrastive, self.temporal, self.confidence]
    }
}

/// Component values of one step and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub detection: f64,
    pub contrastive: f64,
    pub temporal: f64,
    pub confidence: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum, recomputed from the components.
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.detection * self.detection
            + w.contrastive * self.contrastive
            + w.temporal * self.temporal
            + w.confidence * self.confidence
    }
}

/// Combines finite component values under `w`.
pub fn total_loss(
    detection: f64,
    contrastive: f64,
    temporal: f64,
    confidence: f64,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("detection", detection),
        ("contrastive", contrastive),
        ("temporal", temporal),
        ("confidence", confidence),
    ] {
        if !v.is_finite() {
            return Err(Error::Argument(format!("{name} loss is not finite")));
        }
    }
    let mut b = LossBreakdown {
        detection,
        contrastive,
        temporal,
        confidence,
        total: 0.0,
    };
    b.total = b.weighted(w);
    Ok(b)
}

/// Mean squared difference between consecutive per-step features; `None`
/// for fewer than two steps. Steps share the ego frame, so no alignment is
/// applied.
pub fn temporal_loss<'t>(steps: &[Var<'t>]) -> Result<Option<Var<'t>>> {
    if steps.len() < 2 {
        return Ok(None);
    }
    let mut total: Option<Var<'t>> = None;
    for pair in steps.windows(2) {
        let term = pair[1].sub(pair[0])?.square()?.mean()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let total = total.expect("at least one pair");
    Ok(Some(total.scale(1.0 / (steps.len() - 1) as f64)?))
}

/// Mean binary cross-entropy of confidence scores against targets.
pub fn confidence_loss<'t>(scores: &[Var<'t>], targets: &[f64]) -> Result<Var<'t>> {
    if scores.is_empty() || scores.len() != targets.len() {
        return Err(Error::Argument(format!(
            "confidence loss needs matching non-empty inputs, got {} scores and {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Argument("confidence targets must lie in [0, 1]".into()));
    }
    let tape = scores[0].tape();
    let stacked = tape.concat(scores)?;
    stacked.bce(targets.to_vec())?.mean()
}
