//! Multiple-instance training from video-level labels.

mod checkpoint;
mod loss;
mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{FeatureSequence, VideoAnnotation};
use crate::model::{self, ModelConfig, ModelError, ModelParams};
use crate::tensor_file::FormatError;

pub use checkpoint::Checkpoint;
pub use loss::{
    attention_mse_and_grad, attention_supervision_loss, attention_target,
    classification_loss_and_grad, topk_count, topk_mean_aggregate, topk_mean_with_indices,
    total_loss, total_loss_and_grads, video_classification_loss, AttentionTarget, BranchTargets,
    LossBreakdown, LossWeights, TopK,
};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Top-k ratio `r`; `k = max(1, ⌊T / r⌋)`.
    pub topk_ratio: usize,
    pub lambda_base: f64,
    pub lambda_supp: f64,
    pub lambda_att: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            topk_ratio: 8,
            lambda_base: 1.0,
            lambda_supp: 1.0,
            lambda_att: 0.1,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.05,
            momentum: 0.9,
            grad_clip: 5.0,
            steps: 2500,
            batch_size: 16,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.topk_ratio < 1 {
            return bad("topk_ratio must be >= 1".into());
        }
        for (name, v) in [
            ("lambda_base", self.lambda_base),
            ("lambda_supp", self.lambda_supp),
            ("lambda_att", self.lambda_att),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.lambda_supp <= 0.0 {
            return bad("lambda_supp must be > 0: the suppression branch drives detection".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return bad("grad_clip must be >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            base: self.lambda_base,
            supp: self.lambda_supp,
            att: self.lambda_att,
        }
    }
}

/// One training video, features widened to `f64`.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub video_id: String,
    pub features: Array2<f64>,
    pub targets: BranchTargets,
}

impl TrainingExample {
    pub fn new(seq: &FeatureSequence, ann: &VideoAnnotation) -> Self {
        TrainingExample {
            video_id: seq.video_id.clone(),
            features: seq.to_f64(),
            targets: BranchTargets::from_labels(&ann.labels),
        }
    }
}

/// Loss and parameter gradients for a single video.
pub fn example_loss_and_grads(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    example: &TrainingExample,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ModelParams), ModelError> {
    let (out, tape) = model::forward_with_tape(example.features.view(), params, model_cfg)?;
    let (losses, grads) = total_loss_and_grads(
        &out,
        &example.targets,
        cfg.loss_weights(),
        cfg.topk_ratio,
        None,
    );
    let mut acc = params.zeros_like();
    model::backward(params, &tape, &grads, &mut acc);
    Ok((losses, acc))
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_base: f64,
    pub loss_supp: f64,
    pub loss_att: f64,
}

pub trait TrainObserver {
    /// Called after the update of each step with the new parameters.
    fn on_step(&mut self, _record: &StepRecord, _params: &ModelParams) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepRecord>,
}

/// Mini-batch training from `init`. Batches are drawn by reshuffling the
/// examples each epoch; per-example gradients are computed in parallel and
/// summed in batch order, so results do not depend on the thread count.
pub fn train_from(
    init: ModelParams,
    examples: &[TrainingExample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    init.check(model_cfg)?;
    if examples.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let mut params = init;
    let mut flat = model::flatten(&params);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.momentum, flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let results: Vec<(LossBreakdown, Vec<f64>)> = batch
            .par_iter()
            .map(|&i| {
                example_loss_and_grads(&params, model_cfg, &examples[i], cfg)
                    .map(|(l, g)| (l, model::flatten(&g)))
            })
            .collect::<Result<_, _>>()?;

        let n = results.len() as f64;
        let mut grad = vec![0.0; flat.len()];
        let mut mean = LossBreakdown::default();
        for (l, g) in &results {
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            mean.total += l.total / n;
            mean.base += l.base / n;
            mean.supp += l.supp / n;
            mean.att += l.att / n;
        }
        grad.iter_mut().for_each(|g| *g /= n);

        if !mean.total.is_finite() {
            return Err(TrainError::Divergence {
                step,
                detail: format!("non-finite loss {mean:?}"),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Divergence {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut grad, cfg.grad_clip);
        }
        opt.step(&mut flat, &grad);
        if flat.iter().any(|p| !p.is_finite()) {
            return Err(TrainError::Divergence {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }
        model::assign_flat(&mut params, &flat);

        let record = StepRecord {
            step,
            loss_total: mean.total,
            loss_base: mean.base,
            loss_supp: mean.supp,
            loss_att: mean.att,
        };
        log::debug!("step {step}: {record:?}");
        observer.on_step(&record, &params)?;
        log.push(record);
    }
    Ok(TrainOutcome { params, log })
}

/// Initializes parameters from `cfg.seed` and trains.
pub fn train(
    examples: &[TrainingExample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    let init = ModelParams::init(model_cfg, cfg.seed)?;
    train_from(init, examples, model_cfg, cfg, observer)
}

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.lgbf";

pub fn checkpoint_file_name(step: usize) -> String {
    format!("step_{step:06}.lgbf")
}

/// Writes the JSONL log and periodic checkpoints into a directory.
pub struct DirectorySink {
    dir: PathBuf,
    model: ModelConfig,
    train: TrainConfig,
    log: BufWriter<File>,
}

impl DirectorySink {
    pub fn create(
        dir: &Path,
        model: &ModelConfig,
        train: &TrainConfig,
    ) -> Result<Self, TrainError> {
        let io = |source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        let log = File::create(dir.join(TRAIN_LOG_FILE)).map_err(io)?;
        Ok(DirectorySink {
            dir: dir.to_path_buf(),
            model: model.clone(),
            train: train.clone(),
            log: BufWriter::new(log),
        })
    }

    pub fn checkpoint(&self, step: usize, params: &ModelParams) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: Some(self.train.clone()),
            seed: self.train.seed,
            step,
            params: params.clone(),
        }
    }

    /// Flushes the log and writes `final.lgbf`.
    pub fn finish(mut self, params: &ModelParams) -> Result<PathBuf, TrainError> {
        self.log.flush().map_err(|source| TrainError::Io {
            path: self.dir.join(TRAIN_LOG_FILE),
            source,
        })?;
        let path = self.dir.join(FINAL_CHECKPOINT);
        self.checkpoint(self.train.steps, params).save(&path)?;
        Ok(path)
    }
}

impl TrainObserver for DirectorySink {
    fn on_step(&mut self, record: &StepRecord, params: &ModelParams) -> Result<(), TrainError> {
        let line = serde_json::to_string(record).expect("step record serialization");
        writeln!(self.log, "{line}").map_err(|source| TrainError::Io {
            path: self.dir.join(TRAIN_LOG_FILE),
            source,
        })?;
        let done = record.step + 1;
        if self.train.checkpoint_every > 0 && done.is_multiple_of(self.train.checkpoint_every) {
            self.checkpoint(done, params)
                .save(&self.dir.join(checkpoint_file_name(done)))?;
        }
        Ok(())
    }
}
