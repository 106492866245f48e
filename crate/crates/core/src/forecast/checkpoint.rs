//! Versioned JSON checkpoint. Floats are written in shortest round-trip
//! form and parsed with correct rounding, so save → load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Predictor;
use crate::error::{Error, Result};
use crate::types::canonical_field_order;

pub const CHECKPOINT_FORMAT: &str = "lfm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub field_order: Vec<String>,
    pub predictor: Predictor,
}

impl Checkpoint {
    pub fn new(predictor: Predictor) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            field_order: canonical_field_order(),
            predictor,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Contract(format!(
                "not a checkpoint (format `{}`)",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Contract(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if ckpt.field_order != canonical_field_order() {
            return Err(Error::Contract(
                "checkpoint field order differs from the canonical order".into(),
            ));
        }
        ckpt.predictor.validate()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(predictor: &Predictor, path: &Path) -> Result<()> {
    let text = Checkpoint::new(predictor.clone()).to_json()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Predictor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_json(&text)?.predictor)
}
