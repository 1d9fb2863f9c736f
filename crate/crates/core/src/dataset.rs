//! On-disk datasets: one bundle directory per id plus `manifest.json`, a
//! top-level array of manifest entries.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion_train::Sample;
use crate::octa_store::{encode_labels, is_preprocessed, read_bundle, read_preprocessed, write_bundle};
use crate::preprocess::{preprocess_bundle, PreprocessConfig, PreprocessedVolume};
use crate::synthgen::{plan_dataset, render_planned, DatasetSpec, ManifestEntry, Split};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(entries)?).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Renders and writes every phantom one at a time, then the manifest.
pub fn write_synthetic_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let plan = plan_dataset(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(plan.len());
    for p in &plan {
        let (bundle, entry) = render_planned(p)?;
        write_bundle(&bundle, &dir.join(&entry.id))?;
        entries.push(entry);
    }
    write_manifest(&dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

/// Loads a bundle directory, preprocessing raw acquisitions with `config`.
/// Already preprocessed volumes must match `config`.
pub fn load_volume(path: &Path, config: PreprocessConfig) -> Result<PreprocessedVolume> {
    if is_preprocessed(path)? {
        let (volume, meta) = read_preprocessed(path)?;
        let stored = PreprocessConfig {
            y0: meta.y0.unwrap_or(0),
            y1: meta.y1.unwrap_or(0),
        };
        if stored != config {
            return Err(Error::Config(format!(
                "{} was preprocessed with y0={}, y1={}; expected y0={}, y1={}",
                path.display(),
                stored.y0,
                stored.y1,
                config.y0,
                config.y1
            )));
        }
        Ok(PreprocessedVolume {
            id: meta.id,
            grade: meta.grade,
            config,
            volume,
        })
    } else {
        preprocess_bundle(&read_bundle(path)?, config)
    }
}

pub fn entry_path(dir: &Path, entry: &ManifestEntry) -> PathBuf {
    dir.join(&entry.id)
}

/// Labeled samples of one split, in manifest order.
pub fn load_split(dir: &Path, manifest: &[ManifestEntry], split: Split, config: PreprocessConfig) -> Result<Vec<Sample>> {
    manifest
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let pre = load_volume(&entry_path(dir, e), config)?;
            Ok(Sample {
                id: e.id.clone(),
                volume: pre.volume,
                labels: encode_labels(e.grade)?,
            })
        })
        .collect()
}
