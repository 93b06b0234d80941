use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "hypercare-checkpoint-v1";

/// Parameter checkpoint with an opaque JSON header for model metadata.
///
/// Values are written as JSON doubles, which round-trip bitwise for all
/// finite f64; non-finite values are rejected at save and load.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub meta: serde_json::Value,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value, store: &ParamStore) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            meta,
            params: store.params_map().clone(),
        }
    }

    pub fn into_store(self) -> ParamStore {
        let mut store = ParamStore::new();
        for (k, v) in self.params {
            store.insert(k, v);
        }
        store
    }
}

pub fn save_checkpoint(
    path: &Path,
    meta: serde_json::Value,
    store: &ParamStore,
) -> Result<(), NumericsError> {
    for (key, t) in store.iter() {
        if !t.all_finite() {
            return Err(NumericsError::InvalidCheckpoint(format!(
                "parameter {key:?} contains non-finite values"
            )));
        }
    }
    let ckpt = Checkpoint::new(meta, store);
    let json = serde_json::to_string(&ckpt)
        .map_err(|e| NumericsError::InvalidCheckpoint(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NumericsError> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| NumericsError::InvalidCheckpoint(e.to_string()))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(NumericsError::InvalidCheckpoint(format!(
            "unsupported format {:?}",
            ckpt.format
        )));
    }
    for (key, t) in &ckpt.params {
        if !t.all_finite() {
            return Err(NumericsError::InvalidCheckpoint(format!(
                "parameter {key:?} contains non-finite values"
            )));
        }
    }
    Ok(ckpt)
}
