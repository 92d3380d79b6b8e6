//! Versioned named-array checkpoints.
//!
//! A checkpoint is a JSON document holding a flat map of named f64 matrices
//! plus a format version. Probe parameters, toy-model parameters, and
//! optimizer state all serialize through this one container.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Free-form tag describing what the arrays belong to ("gtprobe",
    /// "toytrainer", ...).
    pub kind: String,
    pub arrays: BTreeMap<String, Matrix>,
    /// Scalar metadata (step counters and the like).
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            arrays: BTreeMap::new(),
            scalars: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.arrays.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::validation(format!("checkpoint is missing array '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint version {} (expected {})",
                ck.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ck)
    }
}
