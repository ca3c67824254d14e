//! Detection-level fusion of several models' outputs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::localization::{nms, Detection};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("at least one model output is required")]
    NoModels,
    #[error("expected {expected} weights, got {found}")]
    WeightCount { expected: usize, found: usize },
    #[error("weights must be finite and non-negative with a positive sum")]
    BadWeights,
    #[error("nms threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
}

/// Min-max rescales scores to `[0, 1]` separately for each class. A class
/// whose scores are all equal maps to 0.5.
pub fn normalize_scores(dets: &[Detection]) -> Vec<Detection> {
    let mut range: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for d in dets {
        let r = range
            .entry(d.class_id)
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        r.0 = r.0.min(d.score);
        r.1 = r.1.max(d.score);
    }
    dets.iter()
        .map(|d| {
            let (lo, hi) = range[&d.class_id];
            let score = if hi > lo {
                (d.score - lo) / (hi - lo)
            } else {
                0.5
            };
            Detection { score, ..d.clone() }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub detections: Vec<Detection>,
    /// Size of the weighted union before suppression.
    pub pre_nms_count: usize,
}

/// Normalizes each model's detections, scales them by the model weight,
/// pools them, and runs class-wise NMS per video. Output is grouped by video
/// id in lexicographic order, each group ranked by score.
pub fn ensemble_detections(
    models: &[Vec<Detection>],
    weights: &[f64],
    nms_threshold: f64,
) -> Result<EnsembleOutput, EnsembleError> {
    if models.is_empty() {
        return Err(EnsembleError::NoModels);
    }
    if weights.len() != models.len() {
        return Err(EnsembleError::WeightCount {
            expected: models.len(),
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(EnsembleError::BadWeights);
    }
    if !(nms_threshold > 0.0 && nms_threshold <= 1.0) {
        return Err(EnsembleError::BadThreshold(nms_threshold));
    }

    let mut by_video: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    let mut pre_nms_count = 0;
    for (dets, &w) in models.iter().zip(weights) {
        for mut d in normalize_scores(dets) {
            d.score *= w;
            pre_nms_count += 1;
            by_video.entry(d.video_id.clone()).or_default().push(d);
        }
    }
    let detections = by_video
        .into_values()
        .flat_map(|v| nms(v, nms_threshold))
        .collect();
    Ok(EnsembleOutput {
        detections,
        pre_nms_count,
    })
}
