//! Checkpoints are pretty-printed JSON:
//!
//! ```text
//! { "format": "mmtoc-checkpoint", "version": 1, "seed": …,
//!   "config": { …training config… }, "arch": { …layer widths… },
//!   "params": [ { "name": …, "shape": [...], "values": [...] }, … ] }
//! ```
//!
//! Floats are written in shortest round-trip form, so a reload reproduces
//! every parameter bit for bit. Readers accept any file with the same
//! `format` and `version`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, ModelState, TrainConfig};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mmtoc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub arch: Architecture,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn new(model: &ModelState, config: &TrainConfig) -> Self {
        let store = &model.store;
        let params = store
            .ids()
            .map(|id| ParamRecord {
                name: store.name(id).to_string(),
                shape: store.value(id).shape().to_vec(),
                values: store.value(id).values().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: config.seed,
            config: config.clone(),
            arch: model.arch,
            params,
        }
    }

    /// Rebuilds the model and overwrites every parameter by name.
    pub fn to_model(&self) -> Result<ModelState> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = ModelState::new(self.arch, self.seed);
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter tensors stored, model has {}",
                self.params.len(),
                ids.len()
            )));
        }
        for (id, rec) in ids.into_iter().zip(&self.params) {
            let name = model.store.name(id).to_string();
            let value = model.store.value_mut(id);
            if name != rec.name || value.shape() != rec.shape.as_slice() || rec.values.len() != value.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match model `{name}` {:?}",
                    rec.name,
                    rec.shape,
                    value.shape()
                )));
            }
            value.values_mut().copy_from_slice(&rec.values);
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, model: &ModelState, config: &TrainConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(&Checkpoint::new(model, config))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, TrainConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((ck.to_model()?, ck.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn round_trip_is_exact() {
        let cfg = TrainConfig {
            seed: 11,
            ..TrainConfig::default()
        };
        let mut model = ModelState::new(Architecture::from_config(&cfg, [5, 6, 7]), 11);
        // perturb so values differ from a fresh init
        let mut rng = Rng::new(1);
        for id in model.store.ids().collect::<Vec<_>>() {
            for v in model.store.value_mut(id).values_mut() {
                *v += 1e-3 * rng.normal() / 3.0;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &model, &cfg).unwrap();
        let (back, back_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(back_cfg, cfg);
        let a = model.store.flatten();
        let b = back.store.flatten();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let cfg = TrainConfig::default();
        let model = ModelState::new(Architecture::from_config(&cfg, [5, 6, 7]), 0);
        let mut ck = Checkpoint::new(&model, &cfg);
        ck.params[0].shape = vec![1, 1];
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::new(&model, &cfg);
        ck.version = 99;
        assert!(ck.to_model().is_err());
    }
}
