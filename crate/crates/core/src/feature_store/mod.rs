//! Snippet feature sequences, annotations, and the on-disk dataset layout.
//!
//! A dataset directory holds `manifest.json`, `annotations.json` (HACS /
//! ActivityNet style) and one `.lgbf` feature file per video.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_file::{self, FormatError};

pub use synth::{generate_synthetic_dataset, SynthConfig, SyntheticDataset};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Config(String),
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Per-snippet features of one video, `T` rows by `D` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub features: Array2<f32>,
    pub snippet_duration_sec: f64,
    pub video_duration_sec: f64,
}

impl FeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        features: Array2<f32>,
        snippet_duration_sec: f64,
        video_duration_sec: f64,
    ) -> Result<Self, StoreError> {
        let seq = FeatureSequence {
            video_id: video_id.into(),
            features,
            snippet_duration_sec,
            video_duration_sec,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Features widened to `f64`, the precision the model computes in.
    pub fn to_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    fn validate(&self) -> Result<(), StoreError> {
        let (t, d) = self.features.dim();
        if t == 0 || d == 0 {
            return Err(StoreError::Invalid(format!(
                "{}: feature matrix must be non-empty, got {t}x{d}",
                self.video_id
            )));
        }
        if let Some(((row, col), _)) = self.features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(StoreError::Invalid(format!(
                "{}: {}",
                self.video_id,
                FormatError::NonFinite { row, col }
            )));
        }
        let dt = self.snippet_duration_sec;
        let dur = self.video_duration_sec;
        if !(dt.is_finite() && dt > 0.0 && dur.is_finite() && dur > 0.0) {
            return Err(StoreError::Invalid(format!(
                "{}: durations must be positive (snippet {dt}, video {dur})",
                self.video_id
            )));
        }
        // rows must tile the video up to one snippet of slack
        if (t as f64) * dt < dur - dt - 1e-9 * dur {
            return Err(StoreError::Invalid(format!(
                "{}: {t} snippets of {dt}s do not cover a {dur}s video",
                self.video_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    video_id: String,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "D")]
    d: usize,
    snippet_duration_sec: f64,
    video_duration_sec: f64,
    dtype: String,
}

/// Parses a feature file already read into memory.
pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence, FormatError> {
    let (header, payload) = tensor_file::split_container::<FeatureHeader>(bytes)?;
    if header.dtype != "f32" {
        return Err(FormatError::UnsupportedDtype(header.dtype));
    }
    if header.t == 0 || header.d == 0 {
        return Err(FormatError::MalformedHeader(format!(
            "T and D must be positive, got T={} D={}",
            header.t, header.d
        )));
    }
    let count = header
        .t
        .checked_mul(header.d)
        .ok_or_else(|| FormatError::MalformedHeader("T*D overflows".into()))?;
    tensor_file::check_payload_len(payload, count, 4)?;
    let values = tensor_file::decode_f32(payload);
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite {
            row: i / header.d,
            col: i % header.d,
        });
    }
    let dt = header.snippet_duration_sec;
    let dur = header.video_duration_sec;
    if !(dt > 0.0 && dur > 0.0 && dt.is_finite() && dur.is_finite()) {
        return Err(FormatError::MalformedHeader(format!(
            "durations must be positive, got snippet {dt} and video {dur}"
        )));
    }
    let features = Array2::from_shape_vec((header.t, header.d), values)
        .expect("payload length checked against T*D");
    Ok(FeatureSequence {
        video_id: header.video_id,
        features,
        snippet_duration_sec: dt,
        video_duration_sec: dur,
    })
}

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let header = FeatureHeader {
        video_id: seq.video_id.clone(),
        t: seq.len(),
        d: seq.dim(),
        snippet_duration_sec: seq.snippet_duration_sec,
        video_duration_sec: seq.video_duration_sec,
        dtype: "f32".into(),
    };
    let mut buf = Vec::with_capacity(256 + seq.features.len() * 4);
    tensor_file::write_container(
        &mut buf,
        &header,
        &tensor_file::encode_f32(seq.features.iter().copied()),
    )
    .expect("writing to a Vec cannot fail");
    buf
}

pub fn load_features(path: &Path) -> Result<FeatureSequence, StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    decode_features(&bytes).map_err(|source| StoreError::Format {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<(), StoreError> {
    fs::write(path, encode_features(seq)).map_err(|e| StoreError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Subset name used by HACS / ActivityNet annotation files.
    pub fn subset_name(self) -> &'static str {
        match self {
            Split::Train => "training",
            Split::Val => "validation",
            Split::Test => "testing",
        }
    }

    pub fn from_subset_name(name: &str) -> Option<Split> {
        match name {
            "training" | "train" => Some(Split::Train),
            "validation" | "val" => Some(Split::Val),
            "testing" | "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::from_subset_name(s).ok_or_else(|| format!("unknown split {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub split: Split,
    /// Feature file path, relative to the dataset directory.
    pub features: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub videos: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.videos.iter().filter(move |e| e.split == split)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.class_names.is_empty() {
            return Err(StoreError::Invalid("manifest has no classes".into()));
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if name.eq_ignore_ascii_case("background") {
                return Err(StoreError::Invalid(
                    "\"background\" is implicit and must not be listed as a class".into(),
                ));
            }
            if !seen.insert(name.as_str()) {
                return Err(StoreError::Invalid(format!(
                    "duplicate class name {name:?}"
                )));
            }
        }
        let mut ids = HashSet::new();
        for e in &self.videos {
            if !ids.insert(e.video_id.as_str()) {
                return Err(StoreError::Invalid(format!(
                    "duplicate video id {:?}",
                    e.video_id
                )));
            }
        }
        Ok(())
    }
}

/// One ground-truth action instance, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub class_id: usize,
    pub start_sec: f64,
    pub end_sec: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub duration_sec: f64,
    /// Multi-hot over the action classes.
    pub labels: Vec<bool>,
    pub segments: Vec<Segment>,
}

impl VideoAnnotation {
    pub fn positive_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(c, _)| c)
    }

    pub fn validate(&self, require_label: bool) -> Result<(), StoreError> {
        if require_label && !self.labels.iter().any(|&l| l) {
            return Err(StoreError::Invalid(format!(
                "{}: training video has no positive label",
                self.video_id
            )));
        }
        for s in &self.segments {
            if !(0.0 <= s.start_sec && s.start_sec < s.end_sec && s.end_sec <= self.duration_sec) {
                return Err(StoreError::Invalid(format!(
                    "{}: segment [{}, {}] outside [0, {}]",
                    self.video_id, s.start_sec, s.end_sec, self.duration_sec
                )));
            }
            if !self.labels.get(s.class_id).copied().unwrap_or(false) {
                return Err(StoreError::Invalid(format!(
                    "{}: segment class {} not set in labels",
                    self.video_id, s.class_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSegment {
    pub label: String,
    pub segment: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseEntry {
    pub duration: f64,
    pub subset: String,
    #[serde(default)]
    pub annotations: Vec<AnnotatedSegment>,
}

/// HACS / ActivityNet-style annotation file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub database: BTreeMap<String, DatabaseEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
}

impl AnnotationFile {
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = fs::read(path).map_err(|e| StoreError::io(path, e))?;
        serde_json::from_slice(&text).map_err(|source| StoreError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let text = serde_json::to_vec_pretty(self).expect("annotation serialization");
        fs::write(path, text).map_err(|e| StoreError::io(path, e))
    }

    /// Class vocabulary: the explicit `classes` list, or the sorted set of
    /// labels used in the database when that list is absent.
    pub fn class_names(&self) -> Vec<String> {
        if !self.classes.is_empty() {
            return self.classes.clone();
        }
        let mut names: Vec<String> = self
            .database
            .values()
            .flat_map(|e| e.annotations.iter().map(|a| a.label.clone()))
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn video_annotation(
        &self,
        video_id: &str,
        class_names: &[String],
    ) -> Result<VideoAnnotation, StoreError> {
        let entry = self
            .database
            .get(video_id)
            .ok_or_else(|| StoreError::Invalid(format!("video {video_id:?} has no annotation")))?;
        let mut labels = vec![false; class_names.len()];
        let mut segments = Vec::with_capacity(entry.annotations.len());
        for a in &entry.annotations {
            let class_id = class_names
                .iter()
                .position(|c| *c == a.label)
                .ok_or_else(|| {
                    StoreError::Invalid(format!("{video_id}: unknown label {:?}", a.label))
                })?;
            labels[class_id] = true;
            segments.push(Segment {
                class_id,
                start_sec: a.segment[0],
                end_sec: a.segment[1],
            });
        }
        Ok(VideoAnnotation {
            video_id: video_id.to_string(),
            duration_sec: entry.duration,
            labels,
            segments,
        })
    }
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub annotations: AnnotationFile,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let manifest_path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&manifest_path).map_err(|e| StoreError::io(&manifest_path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|source| StoreError::Json {
                path: manifest_path.clone(),
                source,
            })?;
        manifest.validate()?;
        let annotations = AnnotationFile::load(&root.join(ANNOTATION_FILE))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            annotations,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    pub fn entry(&self, video_id: &str) -> Option<&ManifestEntry> {
        self.manifest.videos.iter().find(|e| e.video_id == video_id)
    }

    pub fn load_video(
        &self,
        entry: &ManifestEntry,
    ) -> Result<(FeatureSequence, VideoAnnotation), StoreError> {
        let seq = load_features(&self.root.join(&entry.features))?;
        if seq.video_id != entry.video_id {
            return Err(StoreError::Invalid(format!(
                "{}: feature file belongs to video {:?}",
                entry.video_id, seq.video_id
            )));
        }
        let ann = self
            .annotations
            .video_annotation(&entry.video_id, &self.manifest.class_names)?;
        ann.validate(entry.split == Split::Train)?;
        Ok((seq, ann))
    }

    /// Loads every video of `split`, in manifest order.
    pub fn load_split(
        &self,
        split: Split,
    ) -> Result<Vec<(FeatureSequence, VideoAnnotation)>, StoreError> {
        self.manifest
            .entries(split)
            .map(|e| self.load_video(e))
            .collect()
    }

    /// Writes a complete dataset directory.
    pub fn write(
        root: &Path,
        manifest: &DatasetManifest,
        annotations: &AnnotationFile,
        sequences: &[FeatureSequence],
    ) -> Result<(), StoreError> {
        manifest.validate()?;
        for entry in &manifest.videos {
            let seq = sequences
                .iter()
                .find(|s| s.video_id == entry.video_id)
                .ok_or_else(|| {
                    StoreError::Invalid(format!("no features for {:?}", entry.video_id))
                })?;
            let path = root.join(&entry.features);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
            }
            write_features(&path, seq)?;
        }
        let manifest_path = root.join(MANIFEST_FILE);
        let text = serde_json::to_vec_pretty(manifest).expect("manifest serialization");
        fs::write(&manifest_path, text).map_err(|e| StoreError::io(&manifest_path, e))?;
        annotations.save(&root.join(ANNOTATION_FILE))
    }
}
