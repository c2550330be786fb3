use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RprlModel, TRUNK_PREFIXES};
use crate::numeric::{ParamSnapshot, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One `epoch,split,metric,value` log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl std::fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.epoch, self.split, self.metric, self.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub run: RunConfig,
    pub model: ModelConfig,
    pub params: ParamSnapshot,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.format_version
            )));
        }
        Ok(ck)
    }

    /// Rebuilds the model and loads the stored parameter values.
    pub fn restore(&self) -> Result<(RprlModel, ParamStore)> {
        let mut store = ParamStore::new();
        let model = RprlModel::new(self.model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        if store.len() != self.params.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.params.len(),
                store.len()
            )));
        }
        copy_params(&self.params, &mut store, |_| true)?;
        Ok((model, store))
    }
}

/// Copies every parameter of `store` accepted by `filter` from `snapshot`;
/// a missing name or a shape difference is a checkpoint error.
pub fn copy_params(snapshot: &ParamSnapshot, store: &mut ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).filter(|n| filter(n)).collect();
    for name in &names {
        let src = snapshot
            .params
            .iter()
            .find(|t| &t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
        let target = store.by_name(name).expect("listed above").value.shape().to_vec();
        if src.shape != target {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {target:?}",
                src.shape
            )));
        }
        store.set_value(name, Tensor::new(src.shape.clone(), src.values.clone())?)?;
    }
    Ok(names.len())
}

/// Warm-starts the shared trunk (context, graph and propagation encoders).
pub fn copy_trunk(snapshot: &ParamSnapshot, store: &mut ParamStore) -> Result<usize> {
    copy_params(snapshot, store, |n| TRUNK_PREFIXES.iter().any(|p| n.starts_with(p)))
}
