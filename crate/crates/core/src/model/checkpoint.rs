//! Versioned JSON checkpoints: model config, variant flags, optional token
//! vocabulary, and every parameter as a flat array with its shape.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::transformer::{ModelConfig, RuleCapModel, Variant};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "rulecap-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub variant: Variant,
    pub rule_in_input: bool,
    pub rule_injection: bool,
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
    pub params: Vec<ParamEntry>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &RuleCapModel, vocab: Option<Vec<String>>) -> Self {
        let params = model
            .params
            .ids()
            .map(|id| {
                let m = model.params.get(id);
                ParamEntry {
                    name: model.params.name(id).to_string(),
                    shape: [m.nrows(), m.ncols()],
                    data: m.iter().copied().collect(),
                }
            })
            .collect();
        ModelCheckpoint {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: model.config().clone(),
            variant: model.variant(),
            rule_in_input: model.rule_in_input,
            rule_injection: model.rule_injection,
            vocab,
            params,
        }
    }

    /// Rebuilds the model, checking every parameter name and shape against
    /// what the config implies.
    pub fn into_model(self) -> Result<(RuleCapModel, Option<Vec<String>>)> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{} (expected {MODEL_FORMAT} v{MODEL_VERSION})",
                self.format, self.version
            )));
        }
        let mut model = RuleCapModel::new(self.config)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config implies {}",
                self.params.len(),
                model.params.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, entry) in ids.into_iter().zip(self.params) {
            let expect = model.params.get(id).dim();
            if model.params.name(id) != entry.name {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} found where {:?} was expected",
                    entry.name,
                    model.params.name(id)
                )));
            }
            if (entry.shape[0], entry.shape[1]) != expect || entry.data.len() != expect.0 * expect.1
            {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} with {} values, expected {:?}",
                    entry.name,
                    entry.shape,
                    entry.data.len(),
                    expect
                )));
            }
            *model.params.get_mut(id) = Array2::from_shape_vec(expect, entry.data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        model.set_variant(self.variant)?;
        model.rule_in_input = self.rule_in_input;
        model.rule_injection = self.rule_injection;
        Ok((model, self.vocab))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }
}
