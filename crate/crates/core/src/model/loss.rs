//! Extractor, generator and joint losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentence scores are clipped to `[BCE_CLIP, 1 - BCE_CLIP]` before the log.
pub const BCE_CLIP: f64 = 1e-7;
/// Gold-token probabilities are floored here before the log.
pub const NLL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub loss_ext: f64,
    pub loss_gen: f64,
    pub loss_total: f64,
    pub target_length: usize,
}

/// Mean binary cross-entropy between sentence scores and labels.
pub fn loss_ext(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} sentence scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&b, &g)| {
            let b = b.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            if g == 1 {
                -b.ln()
            } else {
                -(1.0 - b).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Mean negative log-likelihood of the gold tokens under per-step
/// distributions.
pub fn loss_gen(step_distributions: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("target length must be at least 1".into()));
    }
    if step_distributions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} step distributions for {} targets",
            step_distributions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (dist, &y) in step_distributions.iter().zip(targets) {
        let p = *dist.get(y).ok_or(Error::OutOfVocabulary {
            id: y,
            size: dist.len(),
        })?;
        total -= p.max(NLL_FLOOR).ln();
    }
    Ok(total / targets.len() as f64)
}

/// `L = λ_ext · L_ext + L_gen`; λ_ext = 1 gives the plain sum.
pub fn loss_total(loss_ext: f64, loss_gen: f64, ext_weight: f64) -> f64 {
    ext_weight * loss_ext + loss_gen
}
