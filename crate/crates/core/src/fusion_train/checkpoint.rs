//! Checkpoint directory: `meta.json` (config echo, seeds, trained stages,
//! parameter index) plus `params.bin`, every tensor as little-endian f64 in
//! index order.

use std::fs;
use std::path::Path;

use discover_autograd::ParamKind;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::train::Stage;
use crate::error::{Error, Result};
use crate::preprocess::PreprocessConfig;

pub const CHECKPOINT_FORMAT: &str = "discover-checkpoint/1";
const META_FILE: &str = "meta.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub buffer: bool,
    /// Offset into `params.bin`, in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub init_seed: u64,
    pub train_seed: Option<u64>,
    pub stages: Vec<Stage>,
    pub params: Vec<ParamRecord>,
}

impl CheckpointMeta {
    /// Whether the second branch has been trained.
    pub fn has_c2(&self) -> bool {
        self.stages.iter().any(|s| s.uses_c2())
    }
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    preprocess: PreprocessConfig,
    stages: &[Stage],
    train_seed: Option<u64>,
) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(model.store.len());
    let mut bytes = Vec::new();
    let mut offset = 0;
    for entry in model.store.entries() {
        params.push(ParamRecord {
            name: entry.name.clone(),
            shape: entry.value.shape().to_vec(),
            buffer: entry.kind == ParamKind::Buffer,
            offset,
        });
        for v in entry.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += entry.value.len();
    }
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        model: model.config.clone(),
        preprocess,
        init_seed: model.init_seed,
        train_seed,
        stages: stages.to_vec(),
        params,
    };
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, bytes).map_err(|e| Error::io(&params_path, e))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta)
}

/// Rebuilds the model from its config echo and overwrites every parameter
/// by name; any name, shape or size disagreement is an error.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format '{}'",
            meta.format
        )));
    }
    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "{} is {} bytes, not a whole number of f64 values",
            params_path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut model = Model::new(meta.model.clone(), meta.init_seed)
        .map_err(|e| Error::Checkpoint(format!("invalid config echo: {e}")))?;
    if meta.params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, config builds {}",
            meta.params.len(),
            model.store.len()
        )));
    }
    for rec in &meta.params {
        let id = model
            .store
            .find(&rec.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", rec.name)))?;
        let target = model.store.get_mut(id);
        if target.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' has shape {:?}, model expects {:?}",
                rec.name,
                rec.shape,
                target.shape()
            )));
        }
        let n = target.len();
        let src = values.get(rec.offset..rec.offset + n).ok_or_else(|| {
            Error::Checkpoint(format!("parameter '{}' runs past the end of {PARAMS_FILE}", rec.name))
        })?;
        target.data_mut().copy_from_slice(src);
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_restores_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(ModelConfig::default(), 3).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            for (i, v) in model.store.get_mut(id).data_mut().iter_mut().enumerate() {
                *v += 0.001 * i as f64;
            }
        }
        let meta = save_checkpoint(dir.path(), &model, PreprocessConfig::default(), &[Stage::C1], Some(9)).unwrap();
        assert!(!meta.has_c2());
        let (loaded, meta2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta, meta2);
        for (a, b) in model.store.entries().iter().zip(loaded.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig::default(), 0).unwrap();
        let mut meta = save_checkpoint(dir.path(), &model, PreprocessConfig::default(), &[], None).unwrap();
        meta.params[0].shape.push(1);
        fs::write(dir.path().join(META_FILE), serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
