//! Pipeline config: one JSON file with a section per command, plus
//! `--set section.key=value` overrides applied before parsing.

use std::fs;
use std::path::Path;

use lgbm_core::feature_store::SynthConfig;
use lgbm_core::localization::LocalizeConfig;
use lgbm_core::model::ModelConfig;
use lgbm_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub split: String,
    pub workers: usize,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection {
            split: "val".into(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tiou_thresholds: Vec<f64>,
    /// Annotation subset to score against; `"all"` uses every video.
    pub subset: String,
    pub method: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tiou_thresholds: lgbm_core::evaluation::default_tiou_thresholds(),
            subset: "validation".into(),
            method: "LGBM-Net".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    /// One weight per input; empty means all ones.
    pub weights: Vec<f64>,
    pub nms_threshold: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            weights: Vec::new(),
            nms_threshold: 0.6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub localize: LocalizeConfig,
    pub detect: DetectSection,
    pub eval: EvalSection,
    pub ensemble: EnsembleSection,
}

/// Parses an override value as JSON, falling back to a bare string so that
/// `--set model.global_op=non_local` works without quoting.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Config(format!(
            "override {assignment:?} is not of the form section.key=value"
        ))
    })?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!(
            "override {assignment:?} has an empty key"
        )));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("override {assignment:?}: {key:?} is not a section"))
        })?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override {assignment:?}: parent is not a section")))?;
    obj.insert(keys[keys.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Reads the optional config file, applies overrides, and validates every section.
pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<PipelineConfig> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(CliError::Config("config root must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: PipelineConfig =
        serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.synth.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.localize.validate()?;
    if cfg.detect.workers == 0 {
        return Err(CliError::Config("detect.workers must be >= 1".into()));
    }
    if cfg.eval.tiou_thresholds.is_empty()
        || cfg
            .eval
            .tiou_thresholds
            .iter()
            .any(|t| !(*t > 0.0 && *t <= 1.0))
    {
        return Err(CliError::Config(
            "eval.tiou_thresholds must be non-empty values in (0, 1]".into(),
        ));
    }
    Ok(cfg)
}
