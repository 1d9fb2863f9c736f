//! Ensemble of 2-D classifiers with model dropout and per-member random
//! transforms.

mod augment;
mod backbone;

use std::sync::Arc;

use discover_autograd::nn::Ctx;
use discover_autograd::{sigmoid, Graph, ParamStore, ResampleMap, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{apply_transform, resample_map, AugmentParams, AugmentRanges};
pub use backbone::{reference_backbone, Backbone, BackboneSpec, N_STAGES};

use crate::error::{Error, Result};

/// Clamp applied before taking the logit of an averaged probability.
pub const PROB_LOGIT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvgMode {
    #[default]
    Logit,
    Probability,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Uniform over the non-empty subsets.
    #[default]
    Uniform,
    /// Independent keep decisions, redrawn when empty.
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropoutMask {
    pub delta: Vec<bool>,
}

impl DropoutMask {
    pub fn full(k: usize) -> Self {
        DropoutMask {
            delta: vec![true; k],
        }
    }

    pub fn one_hot(k: usize, j: usize) -> Self {
        DropoutMask {
            delta: (0..k).map(|i| i == j).collect(),
        }
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.delta
            .iter()
            .enumerate()
            .filter(|(_, d)| **d)
            .map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.delta.iter().filter(|d| **d).count()
    }

    /// Subset as a bit pattern, member `i` at bit `i`.
    pub fn bits(&self) -> u64 {
        self.active().fold(0, |acc, i| acc | (1 << i))
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::Validation("dropout mask selects no member".into()));
        }
        Ok(())
    }
}

pub fn draw_dropout_mask(k: usize, rng: &mut impl Rng) -> DropoutMask {
    assert!((1..64).contains(&k), "ensemble size out of range");
    let bits: u64 = rng.gen_range(1..(1u64 << k));
    DropoutMask {
        delta: (0..k).map(|i| bits >> i & 1 == 1).collect(),
    }
}

pub fn draw_bernoulli_mask(k: usize, keep: f64, rng: &mut impl Rng) -> DropoutMask {
    assert!(k >= 1 && keep > 0.0 && keep <= 1.0, "invalid Bernoulli mask");
    loop {
        let delta: Vec<bool> = (0..k).map(|_| rng.gen_bool(keep)).collect();
        if delta.iter().any(|d| *d) {
            return DropoutMask { delta };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: Vec<BackboneSpec>,
    pub mode: AvgMode,
    pub dropout: DropoutMode,
    /// Keep probability for [`DropoutMode::Bernoulli`].
    pub keep_prob: f64,
    pub augment: AugmentRanges,
    /// Augmentation draws averaged at inference.
    pub inference_draws: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: vec![
                BackboneSpec::new("cnn-w6", 6, false),
                BackboneSpec::new("cnn-w8", 8, false),
                BackboneSpec::new("cnn-w6b", 6, true),
            ],
            mode: AvgMode::Logit,
            dropout: DropoutMode::Uniform,
            keep_prob: 0.5,
            augment: AugmentRanges::default(),
            inference_draws: 1,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() || self.members.len() >= 64 {
            return Err(Error::Config(format!(
                "ensemble needs between 1 and 63 members, got {}",
                self.members.len()
            )));
        }
        for m in &self.members {
            m.validate()?;
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "keep_prob {} outside (0, 1]",
                self.keep_prob
            )));
        }
        if self.inference_draws == 0 {
            return Err(Error::Config("inference_draws must be at least 1".into()));
        }
        self.augment.validate()
    }

    pub fn draw_mask(&self, rng: &mut impl Rng) -> DropoutMask {
        match self.dropout {
            DropoutMode::Uniform => draw_dropout_mask(self.members.len(), rng),
            DropoutMode::Bernoulli => draw_bernoulli_mask(self.members.len(), self.keep_prob, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub config: EnsembleConfig,
    pub members: Vec<Backbone>,
}

/// Aggregated ensemble output: averaged logit (or logit of the averaged
/// probability) and probability, both `[B, N]`.
#[derive(Clone, Copy, Debug)]
pub struct EnsembleOutput {
    pub logit: Var,
    pub prob: Var,
}

impl Ensemble {
    pub fn new(
        config: EnsembleConfig,
        in_channels: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let members = config
            .members
            .iter()
            .enumerate()
            .map(|(k, spec)| reference_backbone(spec, in_channels, store, &format!("{prefix}.m{k}"), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble { config, members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Logits of member `k` on `x` warped by one map per batch item.
    pub fn member_logits(
        &self,
        ctx: &mut Ctx,
        k: usize,
        x: Var,
        maps: Option<Vec<Arc<ResampleMap>>>,
    ) -> Var {
        let input = match maps {
            Some(m) => ctx.graph.resample(x, m),
            None => x,
        };
        self.members[k].forward(ctx, input)
    }

    /// Full forward: `maps[k]` holds member `k`'s per-item warps, `None`
    /// meaning no warp.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        mask: &DropoutMask,
        maps: &[Option<Vec<Arc<ResampleMap>>>],
    ) -> EnsembleOutput {
        let logits: Vec<Var> = mask
            .active()
            .map(|k| self.member_logits(ctx, k, x, maps[k].clone()))
            .collect();
        combine(ctx.graph, &logits, self.config.mode)
    }
}

/// Averages member logits (or probabilities) per the mode.
pub fn combine(graph: &mut Graph, logits: &[Var], mode: AvgMode) -> EnsembleOutput {
    assert!(!logits.is_empty(), "no active member");
    let inv = 1.0 / logits.len() as f64;
    match mode {
        AvgMode::Logit => {
            let mut acc = logits[0];
            for &l in &logits[1..] {
                acc = graph.add(acc, l);
            }
            let logit = graph.scale(acc, inv);
            let prob = graph.sigmoid(logit);
            EnsembleOutput { logit, prob }
        }
        AvgMode::Probability => {
            let mut acc = graph.sigmoid(logits[0]);
            for &l in &logits[1..] {
                let p = graph.sigmoid(l);
                acc = graph.add(acc, p);
            }
            let prob = graph.scale(acc, inv);
            let logit = graph.logit(prob, PROB_LOGIT_EPS);
            EnsembleOutput { logit, prob }
        }
    }
}

/// Builds per-member warp maps for a batch of `h x w` images.
pub fn warp_maps(
    params: &[Vec<AugmentParams>],
    h: usize,
    w: usize,
) -> Vec<Option<Vec<Arc<ResampleMap>>>> {
    params
        .iter()
        .map(|per_item| {
            if per_item.iter().all(AugmentParams::is_identity) {
                None
            } else {
                Some(
                    per_item
                        .iter()
                        .map(|p| Arc::new(resample_map(h, w, p)))
                        .collect(),
                )
            }
        })
        .collect()
}

/// Evaluation-mode ensemble prediction for one `[C, H, W]` image, with
/// one transform per member.
pub fn ensemble_forward(
    image: &Tensor,
    ensemble: &Ensemble,
    store: &ParamStore,
    mask: &DropoutMask,
    aug: &[AugmentParams],
    mode: AvgMode,
) -> Result<Vec<f64>> {
    mask.validate()?;
    if mask.delta.len() != ensemble.len() || aug.len() != ensemble.len() {
        return Err(Error::Validation(format!(
            "ensemble of {} members given {} mask flags and {} transforms",
            ensemble.len(),
            mask.delta.len(),
            aug.len()
        )));
    }
    let [c, h, w] = [image.dim(0), image.dim(1), image.dim(2)];
    let mut graph = Graph::new();
    let x = graph.constant(image.clone().reshape(&[1, c, h, w]).expect("same size"));
    let per_member: Vec<Vec<AugmentParams>> = aug.iter().map(|a| vec![*a]).collect();
    let maps = warp_maps(&per_member, h, w);
    let mut ctx = Ctx::new(&mut graph, store, false, false);
    let logits: Vec<Var> = mask
        .active()
        .map(|k| ensemble.member_logits(&mut ctx, k, x, maps[k].clone()))
        .collect();
    let out = combine(ctx.graph, &logits, mode);
    Ok(graph.value(out.prob).data().to_vec())
}

/// Closed-form aggregation of given member logits, for reference.
pub fn aggregate(logits: &[f64], mode: AvgMode) -> f64 {
    let m = logits.len() as f64;
    match mode {
        AvgMode::Logit => sigmoid(logits.iter().sum::<f64>() / m),
        AvgMode::Probability => logits.iter().map(|&l| sigmoid(l)).sum::<f64>() / m,
    }
}
