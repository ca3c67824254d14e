use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    AnnotatedSegment, AnnotationFile, DatabaseEntry, DatasetManifest, FeatureSequence,
    ManifestEntry, Segment, Split, StoreError, VideoAnnotation,
};

/// Synthetic localization benchmark: each video contains 1-3 segments of a
/// single class whose rows are drawn around a class prototype, embedded in
/// zero-mean background noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    /// How many of the `n_videos` go to the validation split; the rest train.
    pub val_videos: usize,
    pub num_classes: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub feature_dim: usize,
    /// Scale of the foreground class mean; prototypes have unit norm.
    pub fg_snr: f64,
    pub noise_std: f64,
    pub min_segment_len: usize,
    pub snippet_duration_sec: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_videos: 250,
            val_videos: 50,
            num_classes: 5,
            t_min: 90,
            t_max: 110,
            feature_dim: 32,
            fg_snr: 1.0,
            noise_std: 0.25,
            min_segment_len: 4,
            snippet_duration_sec: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |msg: String| Err(StoreError::Config(msg));
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.feature_dim < 2 {
            return bad(format!(
                "feature_dim must be >= 2, got {}",
                self.feature_dim
            ));
        }
        if !(self.fg_snr > 0.0 && self.fg_snr.is_finite()) {
            return bad(format!("fg_snr must be positive, got {}", self.fg_snr));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            ));
        }
        if !(self.snippet_duration_sec > 0.0 && self.snippet_duration_sec.is_finite()) {
            return bad("snippet_duration_sec must be positive".into());
        }
        if self.n_videos == 0 || self.val_videos > self.n_videos {
            return bad(format!(
                "need n_videos >= 1 and val_videos <= n_videos, got {} / {}",
                self.n_videos, self.val_videos
            ));
        }
        if self.min_segment_len == 0 {
            return bad("min_segment_len must be >= 1".into());
        }
        if self.t_min > self.t_max {
            return bad(format!("t_min {} exceeds t_max {}", self.t_min, self.t_max));
        }
        // three segments plus the two separating gaps must fit
        let needed = 3 * self.min_segment_len + 2;
        if self.t_min < needed {
            return bad(format!(
                "t_min {} too small to place 3 segments of length {} (need {needed})",
                self.t_min, self.min_segment_len
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<FeatureSequence>,
    pub annotations: Vec<VideoAnnotation>,
    /// Unit-norm class prototypes, one row per class.
    pub prototypes: Array2<f64>,
}

impl SyntheticDataset {
    pub fn annotation_file(&self) -> AnnotationFile {
        let mut database = BTreeMap::new();
        for (entry, ann) in self.manifest.videos.iter().zip(&self.annotations) {
            database.insert(
                ann.video_id.clone(),
                DatabaseEntry {
                    duration: ann.duration_sec,
                    subset: entry.split.subset_name().to_string(),
                    annotations: ann
                        .segments
                        .iter()
                        .map(|s| AnnotatedSegment {
                            label: self.manifest.class_names[s.class_id].clone(),
                            segment: [s.start_sec, s.end_sec],
                        })
                        .collect(),
                },
            );
        }
        AnnotationFile {
            database,
            classes: self.manifest.class_names.clone(),
        }
    }
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticDataset, StoreError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;

    let mut prototypes = Array2::<f64>::zeros((cfg.num_classes, d));
    for mut row in prototypes.rows_mut() {
        row.mapv_inplace(|_| rng.sample(StandardNormal));
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }

    let class_names: Vec<String> = (0..cfg.num_classes)
        .map(|c| format!("action_{c}"))
        .collect();
    let n_train = cfg.n_videos - cfg.val_videos;
    let mut entries = Vec::with_capacity(cfg.n_videos);
    let mut sequences = Vec::with_capacity(cfg.n_videos);
    let mut annotations = Vec::with_capacity(cfg.n_videos);

    for i in 0..cfg.n_videos {
        let video_id = format!("synth_{i:05}");
        let split = if i < n_train {
            Split::Train
        } else {
            Split::Val
        };
        let t = rng.random_range(cfg.t_min..=cfg.t_max);
        let class_id = rng.random_range(0..cfg.num_classes);
        let runs = place_segments(&mut rng, t, cfg.min_segment_len);

        let mut fg = vec![false; t];
        for &(s, e) in &runs {
            fg[s..=e].iter_mut().for_each(|f| *f = true);
        }
        let mean: Array1<f64> = prototypes.row(class_id).mapv(|v| v * cfg.fg_snr);
        let features = Array2::from_shape_fn((t, d), |(row, col)| {
            let noise: f64 = rng.sample(StandardNormal);
            let mu = if fg[row] { mean[col] } else { 0.0 };
            (mu + cfg.noise_std * noise) as f32
        });

        let dt = cfg.snippet_duration_sec;
        let duration = t as f64 * dt;
        let mut labels = vec![false; cfg.num_classes];
        labels[class_id] = true;
        let segments = runs
            .iter()
            .map(|&(s, e)| Segment {
                class_id,
                start_sec: s as f64 * dt,
                end_sec: (e + 1) as f64 * dt,
            })
            .collect();

        entries.push(ManifestEntry {
            video_id: video_id.clone(),
            split,
            features: PathBuf::from("features").join(format!("{video_id}.lgbf")),
        });
        sequences.push(FeatureSequence::new(
            video_id.clone(),
            features,
            dt,
            duration,
        )?);
        annotations.push(VideoAnnotation {
            video_id,
            duration_sec: duration,
            labels,
            segments,
        });
    }

    Ok(SyntheticDataset {
        manifest: DatasetManifest {
            class_names,
            videos: entries,
        },
        sequences,
        annotations,
        prototypes,
    })
}

/// Places 1-3 disjoint, non-adjacent runs (inclusive snippet indices) in a
/// video of `t` snippets. Caller guarantees `t >= 3 * min_len + 2`.
fn place_segments(rng: &mut ChaCha8Rng, t: usize, min_len: usize) -> Vec<(usize, usize)> {
    let n = rng.random_range(1..=3usize);
    let max_len = (t / (2 * n)).max(min_len);
    let lens: Vec<usize> = (0..n)
        .map(|_| rng.random_range(min_len..=max_len))
        .collect();
    let occupied: usize = lens.iter().sum::<usize>() + (n - 1);
    debug_assert!(occupied <= t);
    let free = t - occupied;
    // split the free snippets into n + 1 gaps
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut runs = Vec::with_capacity(n);
    let mut cursor = 0usize;
    let mut prev_cut = 0usize;
    for (k, (&len, &cut)) in lens.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut;
        if k > 0 {
            cursor += 1;
        }
        runs.push((cursor, cursor + len - 1));
        cursor += len;
        prev_cut = cut;
    }
    runs
}
