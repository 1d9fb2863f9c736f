use std::collections::BTreeMap;

use discover_autograd::nn::{apply_updates, Ctx};
use discover_autograd::{Adam, Graph, ParamId, ParamStore, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infer::infer_volume;
use super::model::{Model, C1_PREFIX, C2_PREFIX, PROJECTOR_PREFIX};
use super::{second_branch, stack_slices, FUSE_EPS, LOSS_EPS};
use crate::attribution::{attribution_map, select_bscans, EvalEnsemble, SelectMode, SelectedBScans};
use crate::ensemble::{warp_maps, AugmentParams};
use crate::error::{Error, Result};
use crate::evaluate::roc_auc;
use crate::octa_store::{GradeLabels, Volume3C, N_CUTOFFS};
use crate::projector::volumes_to_tensor;
use crate::synthgen::stream_rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    OneStep,
    #[default]
    TwoStep,
}

/// One optimization phase. `C1` trains the projector and first ensemble on
/// their own output; `C2` trains the second ensemble on the fused output
/// with everything else frozen; `Joint` trains everything on the fused
/// output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    C1,
    C2,
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::C1 => "c1",
            Stage::C2 => "c2",
            Stage::Joint => "joint",
        }
    }

    fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::C1 => &[PROJECTOR_PREFIX, C1_PREFIX],
            Stage::C2 => &[C2_PREFIX],
            Stage::Joint => &[PROJECTOR_PREFIX, C1_PREFIX, C2_PREFIX],
        }
    }

    pub fn uses_c2(self) -> bool {
        self != Stage::C1
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c1" => Ok(Stage::C1),
            "c2" => Ok(Stage::C2),
            "joint" => Ok(Stage::Joint),
            _ => Err(Error::Validation(format!(
                "unknown stage '{s}', expected c1, c2 or joint"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    /// Upper bound on epochs per stage.
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Set from the run seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: Schedule::TwoStep,
            lr: 1e-3,
            lr_decay: 0.99,
            epochs: 60,
            patience: 10,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> Vec<Stage> {
        match self.schedule {
            Schedule::TwoStep => vec![Stage::C1, Stage::C2],
            Schedule::OneStep => vec![Stage::Joint],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub volume: Volume3C,
    pub labels: GradeLabels,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub stage: Stage,
    pub loss: f64,
    /// `None` where a cutoff has a single class in the split.
    pub auc_per_cutoff: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_mean_auc: Option<f64>,
}

/// Per-cutoff AUCs and their mean over the defined ones.
pub fn auc_summary(p: &[Vec<f64>], labels: &[GradeLabels]) -> (Vec<Option<f64>>, Option<f64>) {
    let per: Vec<Option<f64>> = (0..N_CUTOFFS)
        .map(|n| {
            let scores: Vec<f64> = p.iter().map(|r| r[n]).collect();
            let lab: Vec<bool> = labels.iter().map(|l| l.lambda[n] == 1).collect();
            roc_auc(&scores, &lab).ok().map(|r| r.auc)
        })
        .collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per, mean)
}

struct StepOutput {
    loss: f64,
    predictions: Vec<Vec<f64>>,
    grads: BTreeMap<ParamId, Tensor>,
    updates: Vec<(ParamId, Tensor)>,
}

fn draw_augs(ranges: &crate::ensemble::AugmentRanges, members: usize, items: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<AugmentParams>> {
    (0..members)
        .map(|_| (0..items).map(|_| ranges.draw(rng)).collect())
        .collect()
}

/// Forward and backward pass for one mini-batch.
fn train_step(model: &Model, batch: &[&Sample], stage: Stage, rng: &mut ChaCha8Rng) -> Result<StepOutput> {
    let vols: Vec<&Volume3C> = batch.iter().map(|s| &s.volume).collect();
    let [nx, y1, nz] = vols[0].dims;
    let b = batch.len();
    let labels: Vec<f64> = batch.iter().flat_map(|s| s.labels.as_f64()).collect();

    let mut graph = Graph::new();
    let x = graph.constant(volumes_to_tensor(&vols)?);
    let mut updates = Vec::new();
    let front_trains = stage != Stage::C2;

    let mut ctx = Ctx::new(&mut graph, &model.store, front_trains, front_trains);
    let summary = model.projector.forward_image(&mut ctx, x, [nx, nz]);
    let mask1 = model.c1.config.draw_mask(rng);
    let aug1 = draw_augs(&model.c1.config.augment, model.c1.len(), b, rng);
    let out1 = model.c1.forward(&mut ctx, summary, &mask1, &warp_maps(&aug1, nx, nz));
    updates.extend(ctx.take_updates());

    let predicted = if stage == Stage::C1 {
        out1.prob
    } else {
        let images = graph.value(summary).clone();
        let clf = EvalEnsemble {
            ensemble: &model.c1,
            store: &model.store,
        };
        let mut selected: Vec<SelectedBScans> = Vec::with_capacity(b);
        for (i, v) in vols.iter().enumerate() {
            let amap = attribution_map(&images.index_first(i), &clf, model.config.attribution)?;
            selected.push(select_bscans(v, &amap.alpha, SelectMode::Training, rng)?);
        }
        let refs: Vec<&SelectedBScans> = selected.iter().collect();
        let slices = graph.constant(stack_slices(&refs)?);
        let mask2 = model.c2.config.draw_mask(rng);
        let aug2 = draw_augs(&model.c2.config.augment, model.c2.len(), b * N_CUTOFFS, rng);
        let mut ctx = Ctx::new(&mut graph, &model.store, true, true);
        let out2 = second_branch(&mut ctx, &model.c2, slices, &mask2, &warp_maps(&aug2, nx, y1));
        updates.extend(ctx.take_updates());
        let l1 = graph.logit(out1.prob, FUSE_EPS);
        let l2 = graph.logit(out2.prob, FUSE_EPS);
        let s = graph.add(l1, l2);
        graph.sigmoid(s)
    };
    let loss = graph.bce(predicted, &labels, LOSS_EPS);
    let loss_value = graph.value(loss).item();
    let predictions = graph
        .value(predicted)
        .data()
        .chunks(N_CUTOFFS)
        .map(<[f64]>::to_vec)
        .collect();
    let prefixes = stage.trainable_prefixes();
    let grads = graph
        .backward(loss)
        .params(&graph)
        .into_iter()
        .filter(|(id, _)| prefixes.iter().any(|p| model.store.name(*id).starts_with(p)))
        .collect();
    Ok(StepOutput {
        loss: loss_value,
        predictions,
        grads,
        updates,
    })
}

/// Gradients of one training step, for inspection.
pub fn step_gradients(
    model: &Model,
    batch: &[&Sample],
    stage: Stage,
    seed: u64,
) -> Result<(f64, BTreeMap<ParamId, Tensor>)> {
    let mut rng = stream_rng(seed, "step");
    let out = train_step(model, batch, stage, &mut rng)?;
    Ok((out.loss, out.grads))
}

/// Validation predictions (fused when `use_c2`) and loss.
pub fn evaluate_split(
    model: &Model,
    samples: &[Sample],
    use_c2: bool,
    seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let d = infer_volume(model, &s.id, &s.volume, seed, use_c2)?;
        preds.push(d.prediction.p);
    }
    let labels: Vec<GradeLabels> = samples.iter().map(|s| s.labels).collect();
    let loss = super::bce_loss(&preds, &labels)?;
    Ok((loss, preds))
}

/// Trains one stage with early stopping on validation mean AUC; the model
/// is left at its best-validation parameters.
pub fn train_stage(
    model: &mut Model,
    data: &TrainData,
    config: &TrainConfig,
    stage: Stage,
    log: &mut dyn FnMut(&EpochMetrics),
) -> Result<StageReport> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Validation("empty training split".into()));
    }
    let mut rng = stream_rng(config.seed, &format!("train-{}", stage.as_str()));
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epochs_run = 0;
    for epoch in 1..=config.epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut train_preds = Vec::new();
        let mut train_labels = Vec::new();
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let out = train_step(model, &batch, stage, &mut rng)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage {} epoch {epoch} batch {bi}: loss {}",
                    stage.as_str(),
                    out.loss
                )));
            }
            adam.step(&mut model.store, &out.grads);
            apply_updates(&mut model.store, out.updates);
            total += out.loss * batch.len() as f64;
            train_preds.extend(out.predictions);
            train_labels.extend(batch.iter().map(|s| s.labels));
        }
        adam.decay(config.lr_decay);
        let (auc, mean) = auc_summary(&train_preds, &train_labels);
        log(&EpochMetrics {
            epoch,
            split: "train".into(),
            stage,
            loss: total / data.train.len() as f64,
            auc_per_cutoff: auc,
            mean_auc: mean,
        });

        if data.val.is_empty() {
            continue;
        }
        let (val_loss, val_preds) = evaluate_split(model, &data.val, stage.uses_c2(), config.seed)?;
        let val_labels: Vec<GradeLabels> = data.val.iter().map(|s| s.labels).collect();
        let (auc, mean) = auc_summary(&val_preds, &val_labels);
        let metrics = EpochMetrics {
            epoch,
            split: "val".into(),
            stage,
            loss: val_loss,
            auc_per_cutoff: auc,
            mean_auc: mean,
        };
        log(&metrics);
        info!(
            "stage {} epoch {epoch}: train loss {:.4}, val loss {val_loss:.4}, val mean AUC {}",
            stage.as_str(),
            total / data.train.len() as f64,
            mean.map_or("n/a".into(), |m| format!("{m:.4}"))
        );
        let score = mean.unwrap_or(f64::NEG_INFINITY);
        match &best {
            Some((s, _, _)) if score <= *s => {}
            _ => best = Some((score, epoch, model.store.clone())),
        }
        if let Some((_, at, _)) = &best {
            if epoch - at >= config.patience {
                break;
            }
        }
    }
    let (best_epoch, best_auc) = match best {
        Some((score, epoch, store)) => {
            model.store = store;
            (epoch, score.is_finite().then_some(score))
        }
        None => (epochs_run, None),
    };
    Ok(StageReport {
        stage,
        epochs_run,
        best_epoch,
        best_val_mean_auc: best_auc,
    })
}

/// Runs every stage of the configured schedule.
pub fn train(
    model: &mut Model,
    data: &TrainData,
    config: &TrainConfig,
    log: &mut dyn FnMut(&EpochMetrics),
) -> Result<Vec<StageReport>> {
    config
        .stages()
        .into_iter()
        .map(|stage| train_stage(model, data, config, stage, log))
        .collect()
}
