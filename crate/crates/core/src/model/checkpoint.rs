// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel, Weights};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mib-toy-transformer";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    fingerprint: String,
    config: ModelConfig,
    weights: Weights,
}

impl TransformerModel {
    /// Writes a JSON checkpoint with a config header and versioned format tag.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            fingerprint: format!("{:016x}", self.fingerprint()),
            config: self.config().clone(),
            weights: self.weights().clone(),
        };
        fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "{}: checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        let model = Self::new(ck.config, ck.weights)?;
        let fp = format!("{:016x}", model.fingerprint());
        if fp != ck.fingerprint {
            return Err(Error::Incompatible(format!(
                "{}: weight fingerprint {fp} does not match header {}",
                path.display(),
                ck.fingerprint
            )));
        }
        Ok(model)
    }
}
