//! From the suppression-branch CAS to scored temporal detections.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::tiou;
use crate::feature_store::FeatureSequence;
use crate::model::{self, sigmoid, Cas, ModelConfig, ModelError, ModelParams};
use crate::training::topk_mean_aggregate;

#[derive(Debug, Error, PartialEq)]
pub enum LocalizeError {
    #[error("invalid localization config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A run of snippets `t_start..=t_end` for one foreground class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub class_id: usize,
    pub t_start: usize,
    pub t_end: usize,
    pub threshold_level: f64,
}

impl Proposal {
    pub fn len(&self) -> usize {
        self.t_end - self.t_start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub class_id: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

impl Detection {
    pub fn interval(&self) -> [f64; 2] {
        [self.start_sec, self.end_sec]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    /// Strictly increasing flooding levels in (0, 1).
    pub thresholds: Vec<f64>,
    pub margin_ratio: f64,
    /// Classes whose video-level score falls below this are skipped.
    pub min_class_score: f64,
    pub nms_threshold: f64,
    /// Moving-average width applied to each activation curve; 1 disables it.
    pub smoothing_width: usize,
    pub topk_ratio: usize,
}

pub fn default_thresholds() -> Vec<f64> {
    (0..=16).map(|i| (10 + 5 * i) as f64 / 100.0).collect()
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            thresholds: default_thresholds(),
            margin_ratio: 0.25,
            min_class_score: 0.1,
            nms_threshold: 0.6,
            smoothing_width: 1,
            topk_ratio: 8,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<(), LocalizeError> {
        let bad = |m: String| Err(LocalizeError::Config(m));
        if self.thresholds.is_empty() {
            return bad("at least one threshold is required".into());
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return bad("thresholds must lie in (0, 1)".into());
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return bad("thresholds must be strictly increasing".into());
        }
        if !(self.margin_ratio >= 0.0 && self.margin_ratio.is_finite()) {
            return bad("margin_ratio must be >= 0".into());
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return bad("nms_threshold must lie in (0, 1)".into());
        }
        if self.smoothing_width == 0 {
            return bad("smoothing_width must be >= 1".into());
        }
        if self.topk_ratio == 0 {
            return bad("topk_ratio must be >= 1".into());
        }
        Ok(())
    }
}

/// Sigmoid of the foreground columns; the background column is dropped.
pub fn cas_to_activation(cas_supp: &Cas) -> Array2<f64> {
    let c = cas_supp.num_classes();
    cas_supp.scores.slice(ndarray::s![.., ..c]).mapv(sigmoid)
}

/// Centered moving average, window truncated at the sequence ends.
pub fn smooth(act: ArrayView1<f64>, width: usize) -> Array1<f64> {
    if width <= 1 {
        return act.to_owned();
    }
    let t = act.len();
    let half = width / 2;
    Array1::from_shape_fn(t, |i| {
        let lo = i.saturating_sub(half);
        let hi = (i + width - half).min(t);
        act.slice(ndarray::s![lo..hi]).mean().unwrap()
    })
}

/// Every maximal run with `act[t] >= θ`, for each threshold in turn.
pub fn watershed_proposals(
    act: ArrayView1<f64>,
    class_id: usize,
    thresholds: &[f64],
) -> Vec<Proposal> {
    let mut out = Vec::new();
    for &theta in thresholds {
        let mut start = None;
        for (t, &a) in act.iter().enumerate() {
            match (a >= theta, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    out.push(Proposal {
                        class_id,
                        t_start: s,
                        t_end: t - 1,
                        threshold_level: theta,
                    });
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push(Proposal {
                class_id,
                t_start: s,
                t_end: act.len() - 1,
                threshold_level: theta,
            });
        }
    }
    out
}

/// Outer-inner contrast plus the class's video-level score. The flanks are
/// `⌈margin_ratio · len⌉` snippets wide on each side, clipped to the video;
/// the outer mean is over whatever flank snippets exist (0 if none).
pub fn score_proposal(
    act: ArrayView1<f64>,
    p: &Proposal,
    video_score: f64,
    margin_ratio: f64,
) -> f64 {
    let t = act.len();
    let inner = act.slice(ndarray::s![p.t_start..=p.t_end]).mean().unwrap();
    let margin = (margin_ratio * p.len() as f64).ceil() as usize;
    let left = p.t_start.saturating_sub(margin)..p.t_start;
    let right = (p.t_end + 1).min(t)..(p.t_end + 1 + margin).min(t);
    let count = left.len() + right.len();
    let outer = if count == 0 {
        0.0
    } else {
        left.chain(right).map(|i| act[i]).sum::<f64>() / count as f64
    };
    inner - outer + video_score
}

/// Ranking order shared by NMS and evaluation: score descending, then start,
/// end, and class ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_sec.total_cmp(&b.start_sec))
        .then(a.end_sec.total_cmp(&b.end_sec))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy class-wise suppression of detections from one video.
pub fn nms(mut dets: Vec<Detection>, tiou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept.iter().any(|k| {
            k.class_id == d.class_id && tiou(k.interval(), d.interval()) >= tiou_threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Turns a suppression-branch CAS into detections for `seq`.
pub fn detections_from_cas(
    cas_supp: &Cas,
    seq: &FeatureSequence,
    cfg: &LocalizeConfig,
) -> Result<Vec<Detection>, LocalizeError> {
    cfg.validate()?;
    let act = cas_to_activation(cas_supp);
    let video_scores = topk_mean_aggregate(cas_supp, cfg.topk_ratio).mapv(sigmoid);
    let dt = seq.snippet_duration_sec;
    let mut dets = Vec::new();
    for c in 0..cas_supp.num_classes() {
        let vs = video_scores[c];
        if vs < cfg.min_class_score {
            continue;
        }
        let curve = smooth(act.column(c), cfg.smoothing_width);
        for p in watershed_proposals(curve.view(), c, &cfg.thresholds) {
            let score = score_proposal(curve.view(), &p, vs, cfg.margin_ratio);
            let start_sec = p.t_start as f64 * dt;
            let end_sec = ((p.t_end + 1) as f64 * dt).min(seq.video_duration_sec);
            if start_sec < end_sec && score.is_finite() {
                dets.push(Detection {
                    video_id: seq.video_id.clone(),
                    class_id: c,
                    start_sec,
                    end_sec,
                    score,
                });
            }
        }
    }
    Ok(nms(dets, cfg.nms_threshold))
}

pub fn localize(
    seq: &FeatureSequence,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    cfg: &LocalizeConfig,
) -> Result<Vec<Detection>, LocalizeError> {
    let out = model::model_forward(seq.to_f64().view(), params, model_cfg)?;
    detections_from_cas(&out.cas_supp, seq, cfg)
}
