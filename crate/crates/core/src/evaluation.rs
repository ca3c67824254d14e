//! Detection mAP at temporal IoU thresholds, ActivityNet / HACS style.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::feature_store::{AnnotationFile, StoreError};
use crate::localization::Detection;

/// Intersection over union of two `[start, end]` intervals.
pub fn tiou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `0.50, 0.55, …, 0.95`.
pub fn default_tiou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSegment {
    pub video_id: String,
    pub segment: [f64; 2],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub segment: [f64; 2],
}

fn rank(dets: &[ScoredSegment]) -> Vec<&ScoredSegment> {
    let mut sorted: Vec<&ScoredSegment> = dets.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.segment[0].total_cmp(&b.segment[0]))
            .then(a.segment[1].total_cmp(&b.segment[1]))
            .then(a.video_id.cmp(&b.video_id))
    });
    sorted
}

/// True-positive flags for detections in ranked order. Each detection takes
/// the still-unmatched ground truth of its video with the highest tIoU,
/// provided that tIoU reaches `threshold`.
pub fn match_detections(dets: &[ScoredSegment], gts: &[GroundTruth], threshold: f64) -> Vec<bool> {
    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id.as_str()).or_default().push(i);
    }
    let mut used = vec![false; gts.len()];
    rank(dets)
        .into_iter()
        .map(|d| {
            let Some(candidates) = by_video.get(d.video_id.as_str()) else {
                return false;
            };
            let mut ranked: Vec<(f64, usize)> = candidates
                .iter()
                .map(|&g| (tiou(d.segment, gts[g].segment), g))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (iou, g) in ranked {
                if iou < threshold {
                    return false;
                }
                if !used[g] {
                    used[g] = true;
                    return true;
                }
            }
            false
        })
        .collect()
}

/// Area under the precision-recall curve with the precision envelope made
/// non-increasing. Every true positive advances recall by `1 / n_gt`, so the
/// area is the mean interpolated precision at the true positives.
pub fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = tp
        .iter()
        .zip(&precision)
        .filter(|(t, _)| **t)
        .fold(0.0, |acc, (_, p)| acc + p);
    sum / n_gt as f64
}

pub fn average_precision(dets: &[ScoredSegment], gts: &[GroundTruth], threshold: f64) -> f64 {
    interpolated_ap(&match_detections(dets, gts, threshold), gts.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub label: String,
    pub segment: [f64; 2],
    pub score: f64,
}

/// ActivityNet-style detection results file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsFile {
    pub results: BTreeMap<String, Vec<ResultEntry>>,
}

impl ResultsFile {
    /// Every video in `video_ids` gets an entry, possibly empty.
    pub fn from_detections<'a>(
        dets: &[Detection],
        class_names: &[String],
        video_ids: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut results: BTreeMap<String, Vec<ResultEntry>> = video_ids
            .into_iter()
            .map(|v| (v.to_string(), Vec::new()))
            .collect();
        for d in dets {
            results
                .entry(d.video_id.clone())
                .or_default()
                .push(ResultEntry {
                    label: class_names[d.class_id].clone(),
                    segment: [d.start_sec, d.end_sec],
                    score: d.score,
                });
        }
        ResultsFile { results }
    }

    /// Detections with known labels, plus the number of entries skipped
    /// because their label is not in `class_names`.
    pub fn to_detections(&self, class_names: &[String]) -> (Vec<Detection>, usize) {
        let index: HashMap<&str, usize> = class_names
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let mut unknown = 0;
        let mut dets = Vec::new();
        for (vid, entries) in &self.results {
            for e in entries {
                match index.get(e.label.as_str()) {
                    Some(&class_id) => dets.push(Detection {
                        video_id: vid.clone(),
                        class_id,
                        start_sec: e.segment[0],
                        end_sec: e.segment[1],
                        score: e.score,
                    }),
                    None => unknown += 1,
                }
            }
        }
        (dets, unknown)
    }

    pub fn num_detections(&self) -> usize {
        self.results.values().map(Vec::len).sum()
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let bytes = fs::read(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|source| StoreError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let text = serde_json::to_vec_pretty(self).expect("results serialization");
        fs::write(path, text).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Keyed by the threshold printed with two decimals, e.g. `"0.50"`.
    pub map_by_threshold: BTreeMap<String, f64>,
    pub average_map: f64,
    /// AP per class (classes with ground truth only), one value per threshold.
    pub per_class_ap: BTreeMap<String, Vec<f64>>,
    pub unknown_label_count: usize,
    /// Result entries for videos outside the evaluated ground truth.
    pub ignored_video_count: usize,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

impl EvalReport {
    /// Table with one column per threshold and the average, in percent.
    pub fn to_table(&self, method: &str) -> String {
        let mut header = format!("{:<12}", "Method");
        let mut row = format!("{method:<12}");
        for t in &self.thresholds {
            let key = threshold_key(*t);
            let _ = write!(header, " {key:>6}");
            let _ = write!(row, " {:>6.1}", 100.0 * self.map_by_threshold[&key]);
        }
        let _ = write!(header, " {:>11}", "Average mAP");
        let _ = write!(row, " {:>11.1}", 100.0 * self.average_map);
        format!("{header}\n{row}\n")
    }
}

/// Scores `results` against every video of `gt` whose subset is `subset`
/// (all videos when `None`).
pub fn evaluate(
    results: &ResultsFile,
    gt: &AnnotationFile,
    subset: Option<&str>,
    thresholds: &[f64],
) -> EvalReport {
    let class_names = gt.class_names();
    let videos: BTreeMap<&str, _> = gt
        .database
        .iter()
        .filter(|(_, e)| subset.is_none_or(|s| e.subset == s))
        .map(|(k, e)| (k.as_str(), e))
        .collect();

    let mut gts_by_class: Vec<Vec<GroundTruth>> = vec![Vec::new(); class_names.len()];
    for (vid, entry) in &videos {
        for a in &entry.annotations {
            if let Some(c) = class_names.iter().position(|n| *n == a.label) {
                gts_by_class[c].push(GroundTruth {
                    video_id: vid.to_string(),
                    segment: a.segment,
                });
            }
        }
    }

    let (dets, unknown_label_count) = results.to_detections(&class_names);
    let ignored_video_count = results
        .results
        .iter()
        .filter(|(vid, _)| !videos.contains_key(vid.as_str()))
        .map(|(_, e)| e.len())
        .sum();
    if unknown_label_count > 0 {
        log::warn!("{unknown_label_count} result entries have labels outside the class list");
    }
    let mut dets_by_class: Vec<Vec<ScoredSegment>> = vec![Vec::new(); class_names.len()];
    for d in dets
        .into_iter()
        .filter(|d| videos.contains_key(d.video_id.as_str()))
    {
        dets_by_class[d.class_id].push(ScoredSegment {
            video_id: d.video_id,
            segment: [d.start_sec, d.end_sec],
            score: d.score,
        });
    }

    let mut per_class_ap = BTreeMap::new();
    for (c, name) in class_names.iter().enumerate() {
        if gts_by_class[c].is_empty() {
            continue;
        }
        let aps = thresholds
            .iter()
            .map(|&t| average_precision(&dets_by_class[c], &gts_by_class[c], t))
            .collect();
        per_class_ap.insert(name.clone(), aps);
    }

    let mut map_by_threshold = BTreeMap::new();
    let mut total = 0.0;
    for (i, &t) in thresholds.iter().enumerate() {
        let map = if per_class_ap.is_empty() {
            0.0
        } else {
            per_class_ap
                .values()
                .fold(0.0, |acc, aps: &Vec<f64>| acc + aps[i])
                / per_class_ap.len() as f64
        };
        total += map;
        map_by_threshold.insert(threshold_key(t), map);
    }
    let average_map = if thresholds.is_empty() {
        0.0
    } else {
        total / thresholds.len() as f64
    };

    EvalReport {
        thresholds: thresholds.to_vec(),
        map_by_threshold,
        average_map,
        per_class_ap,
        unknown_label_count,
        ignored_video_count,
    }
}
