use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use discover_core::dataset::read_manifest;
use discover_core::evaluate::{delong_test, micro_average_roc, roc_auc, wilcoxon_signed_rank, RocResult};
use discover_core::fusion_train::EnsemblePrediction;
use discover_core::octa_store::{encode_labels, N_CUTOFFS};
use discover_core::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::commands::{sidecar, write_json};
use crate::EvalArgs;

#[derive(Serialize)]
struct Comparison {
    name: String,
    test: &'static str,
    p: f64,
    statistic: f64,
}

#[derive(Serialize)]
pub struct EvalReport {
    n: usize,
    per_cutoff_auc: Vec<Option<f64>>,
    mean_auc: Option<f64>,
    micro_auc: Option<f64>,
    roc_points: BTreeMap<String, RocResult>,
    comparisons: Vec<Comparison>,
}

fn read_predictions(path: &Path) -> Result<Vec<EnsemblePrediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Per-cutoff label columns aligned with `preds`.
fn label_columns(preds: &[EnsemblePrediction], grades: &BTreeMap<String, u8>) -> Result<Vec<Vec<bool>>> {
    let mut cols = vec![Vec::with_capacity(preds.len()); N_CUTOFFS];
    for p in preds {
        let g = grades
            .get(&p.id)
            .ok_or_else(|| Error::Validation(format!("no label for prediction '{}'", p.id)))?;
        let l = encode_labels(*g)?;
        for (col, lam) in cols.iter_mut().zip(l.lambda) {
            col.push(lam == 1);
        }
    }
    Ok(cols)
}

fn column(preds: &[EnsemblePrediction], n: usize, pick: impl Fn(&EnsemblePrediction) -> &[f64]) -> Vec<f64> {
    preds.iter().map(|p| pick(p)[n]).collect()
}

fn per_cutoff_aucs(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Vec<Option<f64>> {
    scores
        .iter()
        .zip(labels)
        .map(|(s, l)| roc_auc(s, l).ok().map(|r| r.auc))
        .collect()
}

fn paired_comparisons(
    name: &str,
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    labels: &[Vec<bool>],
    out: &mut Vec<Comparison>,
) {
    let mut auc_pairs = Vec::new();
    for n in 0..N_CUTOFFS {
        if let Ok(d) = delong_test(&a[n], &b[n], &labels[n]) {
            auc_pairs.push((d.auc_a, d.auc_b));
            out.push(Comparison {
                name: format!("{name}, grade >= {}", n + 1),
                test: "delong",
                p: d.p,
                statistic: d.z,
            });
        }
    }
    if let Ok(w) = wilcoxon_signed_rank(&auc_pairs) {
        out.push(Comparison {
            name: format!("{name}, paired per-cutoff AUCs"),
            test: "wilcoxon_signed_rank",
            p: w.p,
            statistic: w.w,
        });
    }
}

pub fn evaluate_predictions(
    preds: &[EnsemblePrediction],
    grades: &BTreeMap<String, u8>,
    other: Option<&[EnsemblePrediction]>,
) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Validation("no predictions to evaluate".into()));
    }
    let labels = label_columns(preds, grades)?;
    let scores: Vec<Vec<f64>> = (0..N_CUTOFFS).map(|n| column(preds, n, |p| &p.p)).collect();
    let per_cutoff_auc = per_cutoff_aucs(&scores, &labels);
    let defined: Vec<f64> = per_cutoff_auc.iter().flatten().copied().collect();
    let mean_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);

    let mut roc_points = BTreeMap::new();
    for n in 0..N_CUTOFFS {
        if let Ok(r) = roc_auc(&scores[n], &labels[n]) {
            roc_points.insert(format!("grade_ge_{}", n + 1), r);
        }
    }
    let micro = micro_average_roc(&scores, &labels).ok();
    let micro_auc = micro.as_ref().map(|r| r.auc);
    if let Some(r) = micro {
        roc_points.insert("micro".into(), r);
    }

    let mut comparisons = Vec::new();
    if preds.iter().all(|p| p.p2.is_some()) {
        let first: Vec<Vec<f64>> = (0..N_CUTOFFS).map(|n| column(preds, n, |p| &p.p1)).collect();
        paired_comparisons("fused vs first branch", &scores, &first, &labels, &mut comparisons);
    }
    if let Some(other) = other {
        let by_id: BTreeMap<&str, &EnsemblePrediction> = other.iter().map(|p| (p.id.as_str(), p)).collect();
        let aligned: Vec<&EnsemblePrediction> = preds
            .iter()
            .map(|p| {
                by_id
                    .get(p.id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("'{}' missing from comparison predictions", p.id)))
            })
            .collect::<Result<_>>()?;
        let b: Vec<Vec<f64>> = (0..N_CUTOFFS)
            .map(|n| aligned.iter().map(|p| p.p[n]).collect())
            .collect();
        paired_comparisons("predictions vs comparison", &scores, &b, &labels, &mut comparisons);
    }
    Ok(EvalReport {
        n: preds.len(),
        per_cutoff_auc,
        mean_auc,
        micro_auc,
        roc_points,
        comparisons,
    })
}

pub fn run(a: &EvalArgs) -> Result<()> {
    let preds = read_predictions(&a.pred)?;
    let grades: BTreeMap<String, u8> = read_manifest(&a.labels)?
        .into_iter()
        .map(|e| (e.id, e.grade))
        .collect();
    let other = a.compare.as_deref().map(read_predictions).transpose()?;
    let report = evaluate_predictions(&preds, &grades, other.as_deref())?;
    match &a.out {
        Some(out) => {
            write_json(out, &report)?;
            write_json(
                &sidecar(out),
                &json!({ "command": "eval", "pred": a.pred, "labels": a.labels, "compare": a.compare }),
            )?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
