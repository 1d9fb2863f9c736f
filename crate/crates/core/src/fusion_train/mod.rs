//! Second-branch classification of selected B-scans, logit fusion, the
//! ordinal loss, training schedules, inference and checkpoints.

mod checkpoint;
mod infer;
mod model;
mod train;

use std::sync::Arc;

use discover_autograd::nn::Ctx;
use discover_autograd::{sigmoid, Graph, ParamStore, ResampleMap, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ParamRecord, CHECKPOINT_FORMAT};
pub use infer::{infer, infer_volume, InferInput, InferenceDetail};
pub use model::{Model, ModelConfig, C1_PREFIX, C2_PREFIX, PROJECTOR_PREFIX};
pub use train::{
    auc_summary, evaluate_split, step_gradients, train, train_stage, EpochMetrics, Sample,
    Schedule, Stage, StageReport, TrainConfig, TrainData,
};

use crate::attribution::SelectedBScans;
use crate::ensemble::{combine, warp_maps, AugmentParams, DropoutMask, Ensemble, EnsembleOutput};
use crate::error::{Error, Result};
use crate::octa_store::{GradeLabels, N_CUTOFFS};

/// Probabilities are clamped to `[FUSE_EPS, 1 - FUSE_EPS]` before fusion.
pub const FUSE_EPS: f64 = 1e-6;
/// Probabilities are clamped to `[LOSS_EPS, 1 - LOSS_EPS]` in the loss.
pub const LOSS_EPS: f64 = 1e-7;

fn logit(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

/// `sigmoid(logit(p1) + logit(p2))` per cutoff.
pub fn fuse(p1: &[f64], p2: &[f64]) -> Vec<f64> {
    p1.iter()
        .zip(p2)
        .map(|(&a, &b)| sigmoid(logit(a, FUSE_EPS) + logit(b, FUSE_EPS)))
        .collect()
}

/// Mean binary cross-entropy over samples and cutoffs.
pub fn bce_loss(p: &[Vec<f64>], labels: &[GradeLabels]) -> Result<f64> {
    if p.is_empty() || p.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} label sets",
            p.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, l) in p.iter().zip(labels) {
        if row.len() != N_CUTOFFS {
            return Err(Error::Validation(format!(
                "prediction has {} cutoffs, expected {N_CUTOFFS}",
                row.len()
            )));
        }
        for (&q, &lam) in row.iter().zip(&l.as_f64()) {
            let q = q.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
            total += lam * q.ln() + (1.0 - lam) * (1.0 - q).ln();
            count += 1;
        }
    }
    Ok(-total / count as f64)
}

/// Number of cutoffs predicted positive; no monotonicity repair.
pub fn decode_grade(p: &[f64]) -> u8 {
    p.iter().filter(|&&v| v >= 0.5).count() as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub id: String,
    pub p1: Vec<f64>,
    pub p2: Option<Vec<f64>>,
    pub p: Vec<f64>,
    pub z_indices: Vec<usize>,
    pub grade_hat: u8,
}

/// Second-branch graph: `slices` is `[B * N, 3, X, Y1]` with the slices of
/// sample `b` at rows `b * N .. (b + 1) * N`. Output `n` of every member is
/// read from slice `n` only, giving `[B, N]`.
pub fn second_branch(
    ctx: &mut Ctx,
    c2: &Ensemble,
    slices: Var,
    mask: &DropoutMask,
    maps: &[Option<Vec<Arc<ResampleMap>>>],
) -> EnsembleOutput {
    let rows = ctx.graph.shape(slices)[0];
    let n = N_CUTOFFS;
    let b = rows / n;
    let diagonal: Vec<usize> = (0..b)
        .flat_map(|i| (0..n).map(move |k| (i * n + k) * n + k))
        .collect();
    let logits: Vec<Var> = mask
        .active()
        .map(|k| {
            let all = c2.member_logits(ctx, k, slices, maps[k].clone());
            ctx.graph.pick(all, diagonal.clone(), &[b, n])
        })
        .collect();
    combine(ctx.graph, &logits, c2.config.mode)
}

/// Stacks per-sample selected slices into `[B * N, 3, X, Y1]`.
pub fn stack_slices(selected: &[&SelectedBScans]) -> Result<Tensor> {
    let parts: Vec<Tensor> = selected
        .iter()
        .flat_map(|s| s.slices.iter().cloned())
        .collect();
    Tensor::stack(&parts).map_err(|e| Error::Validation(e.to_string()))
}

/// Evaluation-mode second branch for one sample. `aug[k][n]` warps slice
/// `n` for member `k`.
pub fn second_branch_forward(
    slices: &SelectedBScans,
    c2: &Ensemble,
    store: &ParamStore,
    mask: &DropoutMask,
    aug: &[Vec<AugmentParams>],
) -> Result<Vec<f64>> {
    mask.validate()?;
    if slices.slices.len() != N_CUTOFFS {
        return Err(Error::Validation(format!(
            "{} slices given, expected {N_CUTOFFS}",
            slices.slices.len()
        )));
    }
    if aug.len() != c2.len() || mask.delta.len() != c2.len() {
        return Err(Error::Validation(format!(
            "second branch of {} members given {} transforms and {} mask flags",
            c2.len(),
            aug.len(),
            mask.delta.len()
        )));
    }
    let t = stack_slices(&[slices])?;
    let (h, w) = (t.dim(2), t.dim(3));
    let mut graph = Graph::new();
    let x = graph.constant(t);
    let maps = warp_maps(aug, h, w);
    let mut ctx = Ctx::new(&mut graph, store, false, false);
    let out = second_branch(&mut ctx, c2, x, mask, &maps);
    Ok(graph.value(out.prob).data().to_vec())
}
