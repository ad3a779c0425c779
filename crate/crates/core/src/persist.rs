//! Versioned JSON model files: parameters, mask state, preprocessing, the
//! decision threshold and the configuration that produced them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Preprocessor;
use crate::engine::{EngineConfig, Pretrained};
use crate::masking::MaskState;
use crate::model::ModelState;

pub const FORMAT: &str = "adattt-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a model file (format {0:?})")]
    Format(String),
    #[error("unsupported model file version {0} (expected {VERSION})")]
    Version(u32),
    #[error("model file is inconsistent: {0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, PersistError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config: EngineConfig,
    pub preprocessor: Preprocessor,
    pub model: ModelState,
    pub mask: MaskState,
    pub threshold: f64,
    pub val_auc: Option<f64>,
    pub best_epoch: usize,
}

impl ModelFile {
    pub fn new(config: &EngineConfig, preprocessor: &Preprocessor, pre: &Pretrained) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            config: config.clone(),
            preprocessor: preprocessor.clone(),
            model: pre.model.clone(),
            mask: pre.mask.clone(),
            threshold: pre.threshold,
            val_auc: pre.val_auc,
            best_epoch: pre.best_epoch,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != FORMAT {
            return Err(PersistError::Format(file.format));
        }
        if file.version != VERSION {
            return Err(PersistError::Version(file.version));
        }
        file.check()?;
        Ok(file)
    }

    fn check(&self) -> Result<()> {
        self.model
            .check_shapes()
            .map_err(|e| PersistError::Inconsistent(e.to_string()))?;
        if self.model.arch.input_dim != self.preprocessor.input_dim() {
            return Err(PersistError::Inconsistent(format!(
                "model expects {} inputs, preprocessing yields {}",
                self.model.arch.input_dim,
                self.preprocessor.input_dim()
            )));
        }
        if self.mask.probs.len() != self.model.arch.input_dim {
            return Err(PersistError::Inconsistent(format!(
                "mask has {} probabilities",
                self.mask.probs.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|source| PersistError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| PersistError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
