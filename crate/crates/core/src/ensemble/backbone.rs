//! Small strided CNN used as the reference ensemble member.

use discover_autograd::nn::{BatchNorm, Conv2d, Ctx, Linear};
use discover_autograd::{ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::octa_store::N_CUTOFFS;

pub const N_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    /// Channels of the first stage; each later stage doubles it.
    pub width: usize,
    /// Adds a stride-1 convolution to every stage.
    #[serde(default)]
    pub extra_conv: bool,
    #[serde(default = "default_outputs")]
    pub n_outputs: usize,
}

fn default_outputs() -> usize {
    N_CUTOFFS
}

impl BackboneSpec {
    pub fn new(name: &str, width: usize, extra_conv: bool) -> Self {
        BackboneSpec {
            name: name.into(),
            width,
            extra_conv,
            n_outputs: N_CUTOFFS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config(format!("backbone '{}' has zero width", self.name)));
        }
        if self.n_outputs != N_CUTOFFS {
            return Err(Error::Config(format!(
                "backbone '{}' must emit {N_CUTOFFS} logits, not {}",
                self.name, self.n_outputs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv2d,
    bn: BatchNorm,
    extra: Option<(Conv2d, BatchNorm)>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    stages: Vec<Stage>,
    head: Linear,
}

impl Backbone {
    /// Maps `[B, C, H, W]` to `[B, n_outputs]` raw logits.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let mut h = x;
        for s in &self.stages {
            h = s.conv.forward(ctx, h);
            h = s.bn.forward(ctx, h);
            h = ctx.graph.relu(h);
            if let Some((conv, bn)) = &s.extra {
                h = conv.forward(ctx, h);
                h = bn.forward(ctx, h);
                h = ctx.graph.relu(h);
            }
        }
        let pooled = ctx.graph.global_avg_pool(h);
        self.head.forward(ctx, pooled)
    }
}

pub fn reference_backbone(
    spec: &BackboneSpec,
    in_channels: usize,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<Backbone> {
    spec.validate()?;
    let mut c_in = in_channels;
    let mut stages = Vec::with_capacity(N_STAGES);
    for i in 0..N_STAGES {
        let c = spec.width << i;
        let name = format!("{prefix}.stage{}", i + 1);
        let conv = Conv2d::new(store, &format!("{name}.conv"), c_in, c, 3, 2, 1, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), c);
        let extra = spec.extra_conv.then(|| {
            (
                Conv2d::new(store, &format!("{name}.conv_b"), c, c, 3, 1, 1, rng),
                BatchNorm::new(store, &format!("{name}.bn_b"), c),
            )
        });
        stages.push(Stage { conv, bn, extra });
        c_in = c;
    }
    let head = Linear::new(store, &format!("{prefix}.head"), c_in, spec.n_outputs, rng);
    Ok(Backbone {
        spec: spec.clone(),
        stages,
        head,
    })
}
