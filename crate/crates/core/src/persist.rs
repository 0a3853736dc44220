//! Model files: config, normalization bounds and named weight tensors as JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormParams;
use crate::error::{Error, Result};
use crate::lstm::{ModelConfig, ModelParams};
use crate::tensor::Matrix;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    config: ModelConfig,
    norm_params: NormParams,
    weights: Vec<WeightEntry>,
}

/// A trained model together with what is needed to score new data with it.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub config: ModelConfig,
    pub norm_params: NormParams,
    pub params: ModelParams,
}

impl SavedModel {
    pub fn to_json(&self) -> Result<String> {
        let weights = self
            .params
            .named_tensors()
            .into_iter()
            .map(|(name, m)| WeightEntry { name, rows: m.rows(), cols: m.cols(), data: m.as_slice().to_vec() })
            .collect();
        let file = ModelFile {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            norm_params: self.norm_params.clone(),
            weights,
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Model(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        match raw.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(Error::Model(format!("unsupported schema_version {v}"))),
            None => return Err(Error::Model("missing field `schema_version`".into())),
        }
        let file: ModelFile = serde_json::from_value(raw).map_err(|e| Error::Model(e.to_string()))?;
        file.config.validate()?;
        if file.norm_params.dim() != file.config.input_dim {
            return Err(Error::Model(format!(
                "norm_params cover {} dimensions but the model expects {}",
                file.norm_params.dim(),
                file.config.input_dim
            )));
        }

        let mut params = ModelParams::zeros(&file.config);
        let expected: Vec<(String, (usize, usize))> =
            params.named_tensors().into_iter().map(|(n, m)| (n, m.shape())).collect();
        if file.weights.len() != expected.len() {
            return Err(Error::Model(format!(
                "expected {} weight tensors, found {}",
                expected.len(),
                file.weights.len()
            )));
        }
        for ((slot, (name, shape)), entry) in params.tensors_mut().into_iter().zip(&expected).zip(&file.weights) {
            if &entry.name != name {
                return Err(Error::Model(format!("expected tensor `{name}`, found `{}`", entry.name)));
            }
            if (entry.rows, entry.cols) != *shape {
                return Err(Error::Model(format!(
                    "tensor `{name}` is {}x{} but the config implies {}x{}",
                    entry.rows, entry.cols, shape.0, shape.1
                )));
            }
            *slot = Matrix::new(entry.rows, entry.cols, entry.data.clone())
                .map_err(|_| Error::Model(format!("tensor `{name}` has {} values", entry.data.len())))?;
        }
        if !params.is_finite() {
            return Err(Error::Model("weights contain non-finite values".into()));
        }
        Ok(Self { config: file.config, norm_params: file.norm_params, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
