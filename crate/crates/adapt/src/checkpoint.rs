//! Checkpoint serialization: model config echo, named parameter blobs, and
//! optimizer state in one versioned JSON document.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use adapt_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AdaptModel, ModelConfig, ModelError};
use crate::train::adam::AdamState;

pub const CKPT_SCHEMA: &str = "adapt-ckpt/1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn default_schema() -> String {
    CKPT_SCHEMA.to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub model: ModelConfig,
    pub trained_epochs: usize,
    pub global_step: usize,
    pub params: Vec<ParamBlob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    /// Snapshot a model (parameters stored as f64) plus training progress.
    pub fn capture<T: Real>(
        model: &AdaptModel<T>,
        trained_epochs: usize,
        global_step: usize,
        optimizer: Option<AdamState>,
    ) -> Checkpoint {
        let params = model
            .params
            .iter()
            .map(|(name, tensor)| ParamBlob {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                data: tensor.data().iter().map(|&v| Real::to_f64(v)).collect(),
            })
            .collect();
        Checkpoint {
            schema: CKPT_SCHEMA.to_string(),
            model: model.config.clone(),
            trained_epochs,
            global_step,
            params,
            optimizer,
        }
    }

    /// Rebuild the model: construct from the config echo, then overwrite
    /// every parameter from its named blob. Names and shapes must match the
    /// freshly built structure exactly.
    pub fn restore<T: Real>(&self) -> Result<AdaptModel<T>, CheckpointError> {
        if self.schema != CKPT_SCHEMA {
            return Err(CheckpointError::Format(format!(
                "unsupported checkpoint schema {:?}, expected {CKPT_SCHEMA:?}",
                self.schema
            )));
        }
        let mut model = AdaptModel::<T>::init(self.model.clone())?;
        if self.params.len() != model.params.len() {
            return Err(CheckpointError::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, blob) in ids.into_iter().zip(&self.params) {
            let name = model.params.name(id);
            if name != blob.name {
                return Err(CheckpointError::Format(format!(
                    "parameter order mismatch: expected {name:?}, found {:?}",
                    blob.name
                )));
            }
            if model.params.value(id).shape() != blob.shape.as_slice() {
                return Err(CheckpointError::Format(format!(
                    "parameter {name:?} has shape {:?} in checkpoint, expected {:?}",
                    blob.shape,
                    model.params.value(id).shape()
                )));
            }
            let data: Vec<T> = blob.data.iter().map(|&v| T::from_f64(v)).collect();
            *model.params.value_mut(id) = Tensor::new(blob.shape.clone(), data)
                .map_err(|e| CheckpointError::Format(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let file = File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let file = File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Setting;

    fn small_model() -> AdaptModel<f64> {
        AdaptModel::init(ModelConfig {
            d: 8,
            l_subgraph: 1,
            l_interactions: 1,
            heads: 2,
            d_ff: 8,
            k_modes: 2,
            t_past: 4,
            t_future: 3,
            setting: Setting::MultiAgent,
            init_seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn capture_restore_roundtrip_is_exact() {
        let model = small_model();
        let ckpt = Checkpoint::capture(&model, 3, 120, None);
        let restored: AdaptModel<f64> = ckpt.restore().unwrap();
        assert_eq!(restored.config, model.config);
        for (id_a, id_b) in model.params.ids().zip(restored.params.ids()) {
            assert_eq!(model.params.value(id_a).data(), restored.params.value(id_b).data());
        }
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let model = small_model();
        let ckpt = Checkpoint::capture(&model, 1, 7, None);
        let dir = std::env::temp_dir().join("adapt-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let restored: AdaptModel<f64> = loaded.restore().unwrap();
        for (id_a, id_b) in model.params.ids().zip(restored.params.ids()) {
            assert_eq!(model.params.value(id_a).data(), restored.params.value(id_b).data());
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn schema_and_shape_mismatches_are_rejected() {
        let model = small_model();
        let mut ckpt = Checkpoint::capture(&model, 0, 0, None);
        ckpt.schema = "adapt-ckpt/0".into();
        assert!(ckpt.restore::<f64>().is_err());

        let mut ckpt = Checkpoint::capture(&model, 0, 0, None);
        ckpt.params[0].shape = vec![1, 1];
        ckpt.params[0].data = vec![0.0];
        assert!(ckpt.restore::<f64>().is_err());
    }
}
