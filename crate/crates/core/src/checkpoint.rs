//! JSON model checkpoints.
//!
//! A checkpoint is a single JSON object:
//!
//! ```text
//! {
//!   "format": 1,
//!   "spec": { "variant": "plain", "input_shape": [6, 1], ... },
//!   "params": { "layers": [ { "input_size": 1, "hidden": 32,
//!                             "u": [ {"rows": 32, "cols": 1, "data": [...]}, x4 ],
//!                             "w": [...], "b": [[...], x4] }, ... ],
//!               "head": { "w": {...}, "b": [...] } },
//!   "scale": 41230.5,
//!   "embedding": { "dimension": 6, "time_lag": 2, "horizons": 4, "contiguous": false },
//!   "seed": 42
//! }
//! ```
//!
//! Matrices are row-major. Floats are written with the shortest
//! representation that parses back to the same bits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::models::{Model, ModelParams, ModelSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub spec: ModelSpec,
    pub params: ModelParams,
    /// Normalisation scale of the target series.
    pub scale: f64,
    pub embedding: EmbeddingConfig,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(model: &Model, scale: f64, embedding: EmbeddingConfig, seed: u64) -> Self {
        Self {
            format: FORMAT_VERSION,
            spec: model.spec.clone(),
            params: model.params.clone(),
            scale,
            embedding,
            seed,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.spec.clone(), self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT_VERSION {
            return Err(Error::Unsupported(format!(
                "checkpoint format {} (this build reads {FORMAT_VERSION})",
                ck.format
            )));
        }
        ck.params.check_against(&ck.spec)?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
