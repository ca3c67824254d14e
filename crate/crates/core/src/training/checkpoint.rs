//! Checkpoints: JSON metadata plus every named parameter tensor, stored in
//! the same `LGBF` container as feature files (payload dtype `f64`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::model::{ModelConfig, ModelParams, ParamVisit};
use crate::tensor_file::{self, FormatError};

const FORMAT_TAG: &str = "lgbm-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub step: usize,
    pub params: ModelParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    model: ModelConfig,
    #[serde(default)]
    train: Option<TrainConfig>,
    seed: u64,
    step: usize,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        self.params.visit("", &mut |name, shape, data| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
            });
            payload.extend(tensor_file::encode_f64(data.iter().copied()));
        });
        let header = CheckpointHeader {
            format: FORMAT_TAG.into(),
            model: self.model.clone(),
            train: self.train.clone(),
            seed: self.seed,
            step: self.step,
            dtype: "f64".into(),
            tensors,
        };
        let mut buf = Vec::new();
        tensor_file::write_container(&mut buf, &header, &payload)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let (header, payload) = tensor_file::split_container::<CheckpointHeader>(bytes)?;
        if header.format != FORMAT_TAG {
            return Err(FormatError::MalformedHeader(format!(
                "not a checkpoint (format {:?})",
                header.format
            )));
        }
        if header.dtype != "f64" {
            return Err(FormatError::UnsupportedDtype(header.dtype));
        }
        let mut params = ModelParams::init(&header.model, 0)
            .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
        let mut expected = Vec::new();
        params.visit("", &mut |name, shape, _| {
            expected.push((name.to_string(), shape.to_vec()))
        });
        let stored: Vec<(String, Vec<usize>)> = header
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        if expected != stored {
            return Err(FormatError::MalformedHeader(
                "tensor list does not match the model config".into(),
            ));
        }
        let count: usize = stored
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        tensor_file::check_payload_len(payload, count, 8)?;
        let values = tensor_file::decode_f64(payload);
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { row: i, col: 0 });
        }
        crate::model::assign_flat(&mut params, &values);
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            seed: header.seed,
            step: header.step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.encode()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Checkpoint::decode(&bytes).map_err(|source| TrainError::Format {
            path: path.to_path_buf(),
            source,
        })
    }
}
