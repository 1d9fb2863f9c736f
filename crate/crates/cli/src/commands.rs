use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use discover_core::config::{env_seed, RunConfig};
use discover_core::dataset::{load_split, load_volume, read_manifest, write_synthetic_dataset, MANIFEST_FILE};
use discover_core::fusion_train::{
    infer_volume, load_checkpoint, save_checkpoint, EnsemblePrediction, EpochMetrics, Model, Stage, TrainData,
};
use discover_core::octa_store::{is_preprocessed, write_preprocessed};
use discover_core::report::write_report;
use discover_core::synthgen::{DatasetSpec, Split};
use discover_core::{Error, Result};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::{InferArgs, PreprocessArgs, ReportArgs, SynthArgs, TrainArgs};

pub fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let bad = || Error::Validation(format!("dims '{s}' is not of the form XxYxZ"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut dims = [0; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p.trim().parse().map_err(|_| bad())?;
    }
    Ok(dims)
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Snapshot path for commands whose output is a single file.
pub fn sidecar(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.config.json"))
}

fn require_checkpoint(dir: &Path) -> Result<()> {
    if !dir.join("meta.json").is_file() {
        return Err(Error::Validation(format!("no checkpoint at {}", dir.display())));
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let dims = parse_dims(&a.dims)?;
    let mut spec = DatasetSpec::new(a.n_per_grade, dims, resolve_seed(a.seed)?);
    spec.noise_level = a.noise;
    spec.n_layers = a.layers;
    let entries = write_synthetic_dataset(&spec, &a.out)?;
    write_json(
        &a.out.join("config.resolved.json"),
        &json!({ "command": "synth", "dataset": spec }),
    )?;
    info!("wrote {} bundles to {}", entries.len(), a.out.display());
    Ok(())
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(y0) = a.y0 {
        cfg.preprocess.y0 = y0;
    }
    if let Some(y1) = a.y1 {
        cfg.preprocess.y1 = y1;
    }
    let pc = cfg.preprocess;
    let manifest_path = a.input.join(MANIFEST_FILE);
    let inputs: Vec<PathBuf> = if manifest_path.is_file() {
        let manifest = read_manifest(&manifest_path)?;
        fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        fs::copy(&manifest_path, a.out.join(MANIFEST_FILE)).map_err(|e| Error::io(&manifest_path, e))?;
        manifest.iter().map(|e| a.input.join(&e.id)).collect()
    } else {
        vec![a.input.clone()]
    };
    let single = inputs.len() == 1 && !manifest_path.is_file();
    for path in &inputs {
        if is_preprocessed(path)? {
            return Err(Error::Validation(format!("{} is already preprocessed", path.display())));
        }
        let pre = load_volume(path, pc)?;
        let dest = if single { a.out.clone() } else { a.out.join(&pre.id) };
        write_preprocessed(&pre.id, pre.grade, &pre.volume, pc.y0, pc.y1, &dest)?;
    }
    write_json(
        &a.out.join("config.resolved.json"),
        &json!({ "command": "preprocess", "preprocess": pc }),
    )?;
    info!("preprocessed {} bundle(s) into {}", inputs.len(), a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let seed = cfg.resolve_seed(a.seed)?;
    let (mut model, mut stages_done) = match &a.from {
        Some(dir) => {
            require_checkpoint(dir)?;
            let (model, meta) = load_checkpoint(dir)?;
            if a.config.is_some() && (cfg.model != meta.model || cfg.preprocess != meta.preprocess) {
                return Err(Error::Config(format!(
                    "model or preprocessing settings differ from checkpoint {}",
                    dir.display()
                )));
            }
            cfg.model = meta.model.clone();
            cfg.preprocess = meta.preprocess;
            (model, meta.stages)
        }
        None => (Model::new(cfg.model.clone(), seed)?, Vec::new()),
    };
    let stages = match a.stage {
        Some(Stage::C2) if a.from.is_none() => {
            return Err(Error::Validation("--stage c2 needs --from with a trained c1 checkpoint".into()));
        }
        Some(s) => vec![s],
        None => cfg.train.stages(),
    };
    cfg.train.validate()?;

    let manifest = read_manifest(&a.data.join(MANIFEST_FILE))?;
    let data = TrainData {
        train: load_split(&a.data, &manifest, Split::Train, cfg.preprocess)?,
        val: load_split(&a.data, &manifest, Split::Val, cfg.preprocess)?,
    };
    info!("{} training and {} validation volumes", data.train.len(), data.val.len());
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    cfg.write_snapshot(&a.out)?;

    let mut reports = Vec::new();
    for stage in stages {
        let path = a.out.join(format!("metrics_{}.jsonl", stage.as_str()));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let mut io_err = None;
        let mut log = |m: &EpochMetrics| {
            let line = serde_json::to_string(m).expect("metrics serialize");
            if let Err(e) = writeln!(w, "{line}") {
                io_err.get_or_insert(e);
            }
        };
        let report = discover_core::fusion_train::train_stage(&mut model, &data, &cfg.train, stage, &mut log)?;
        if let Some(e) = io_err {
            return Err(Error::io(&path, e));
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        info!(
            "stage {} done after {} epochs, best epoch {} (val mean AUC {:?})",
            stage.as_str(),
            report.epochs_run,
            report.best_epoch,
            report.best_val_mean_auc
        );
        if !stages_done.contains(&stage) {
            stages_done.push(stage);
        }
        reports.push(report);
        save_checkpoint(&a.out, &model, cfg.preprocess, &stages_done, Some(seed))?;
    }
    write_json(&a.out.join("train_report.json"), &reports)
}

fn infer_inputs(input: &Path, split: Option<Split>) -> Result<Vec<PathBuf>> {
    let manifest_path = input.join(MANIFEST_FILE);
    if manifest_path.is_file() {
        Ok(read_manifest(&manifest_path)?
            .iter()
            .filter(|e| split.is_none_or(|s| s == e.split))
            .map(|e| input.join(&e.id))
            .collect())
    } else if split.is_some() {
        Err(Error::Validation(format!("--split given but {} has no manifest", input.display())))
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

pub fn infer(a: &InferArgs) -> Result<()> {
    require_checkpoint(&a.ckpt)?;
    let seed = resolve_seed(a.seed)?;
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let use_c2 = meta.has_c2();
    let mut predictions: Vec<EnsemblePrediction> = Vec::new();
    for path in infer_inputs(&a.input, a.split)? {
        let pre = load_volume(&path, meta.preprocess)?;
        predictions.push(infer_volume(&model, &pre.id, &pre.volume, seed, use_c2)?.prediction);
    }
    write_json(&a.out, &predictions)?;
    write_json(
        &sidecar(&a.out),
        &json!({
            "command": "infer",
            "input": a.input,
            "ckpt": a.ckpt,
            "seed": seed,
            "split": a.split,
            "use_c2": use_c2,
        }),
    )?;
    info!("wrote {} prediction(s) to {}", predictions.len(), a.out.display());
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    require_checkpoint(&a.ckpt)?;
    let seed = resolve_seed(a.seed)?;
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let pre = load_volume(&a.input, meta.preprocess)?;
    let detail = infer_volume(&model, &pre.id, &pre.volume, seed, meta.has_c2())?;
    let files = write_report(&a.out, &detail)?;
    write_json(&a.out.join("prediction.json"), &detail.prediction)?;
    write_json(
        &a.out.join("config.resolved.json"),
        &json!({ "command": "report", "input": a.input, "ckpt": a.ckpt, "seed": seed }),
    )?;
    info!("report written to {}", files.index.display());
    Ok(())
}
