//! Run configuration read from TOML or JSON; every model, preprocessing and
//! training hyperparameter has a key, and unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion_train::{ModelConfig, TrainConfig};
use crate::preprocess::PreprocessConfig;

pub const SEED_ENV: &str = "DISCOVER_SEED";
pub const SNAPSHOT_FILE: &str = "config.resolved.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses by extension: `.json` as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Fixes the seed from, in order: `flag`, the config file, the
    /// environment, zero.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        };
        self.seed = Some(seed);
        self.train.seed = seed;
        Ok(seed)
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[model.projector]\nphi = 2\nwidth = 3\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        fs::write(&p, "seed = 4\n[model.projector]\nphi = 2\n[train]\nepochs = 3\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!((cfg.seed, cfg.model.projector.phi, cfg.train.epochs), (Some(4), 2, 3));
    }

    #[test]
    fn snapshot_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.resolve_seed(Some(11)).unwrap();
        cfg.write_snapshot(dir.path()).unwrap();
        let mut back = RunConfig::load(&dir.path().join(SNAPSHOT_FILE)).unwrap();
        back.resolve_seed(None).unwrap();
        assert_eq!(back, cfg);
    }
}
