//! Parameter checkpoints: a JSON document of named matrices with shapes.
//! Floats are written with shortest round-trip formatting, so a saved
//! checkpoint reloads bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DrlError, Result};
use crate::numkernel::ParamStore;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub base_trained: bool,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(params: ParamStore, base_trained: bool) -> Self {
        Self {
            format: CHECKPOINT_FORMAT,
            base_trained,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(DrlError::Config(format!("unsupported checkpoint format {}", ck.format)));
        }
        for (_, name, m) in ck.params.iter() {
            if !m.is_finite() {
                return Err(DrlError::NonFinite(format!("checkpoint parameter `{name}`")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
