use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::Tensor;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major.
    pub values: Vec<f64>,
}

/// Everything needed to reload a trained model, stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    pub vocab: Option<Vocabulary>,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn new(
        model_config: &ModelConfig,
        params: &ModelParameters,
        vocab: Option<&Vocabulary>,
        train_config: Option<&TrainConfig>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model_config: model_config.clone(),
            tensors: params
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape(),
                    values: t.data().to_vec(),
                })
                .collect(),
            vocab: vocab.cloned(),
            train_config: train_config.cloned(),
        }
    }

    pub fn params(&self) -> Result<ModelParameters> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let [r, c] = t.shape;
                Tensor::new(r, c, t.values.clone())
                    .map(|v| (t.name.clone(), v))
                    .map_err(|_| Error::Checkpoint(format!("tensor '{}' has the wrong number of values", t.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        ModelParameters::from_named(&self.model_config, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}
