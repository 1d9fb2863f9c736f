//! Parameterised layers built on top of [`Graph`] operations.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{he_uniform, lecun_uniform, ParamId, ParamStore};
use crate::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass context: the graph being recorded, read access to the
/// parameters and the mode flags.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a ParamStore,
    /// Batch statistics for normalization when set, running statistics otherwise.
    pub train: bool,
    /// Whether parameters receive gradients.
    pub trainable: bool,
    /// Running-statistic updates produced by training-mode normalization.
    pub updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, train: bool, trainable: bool) -> Self {
        Ctx {
            graph,
            store,
            train,
            trainable,
            updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        self.graph.param(id, value, self.trainable)
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }
}

/// Applies running-statistic updates collected by [`Ctx`].
pub fn apply_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) {
    for (id, value) in updates {
        *store.get_mut(id) = value;
    }
}

/// 1-D convolution along depth with receptive field 1 across positions.
#[derive(Clone, Debug)]
pub struct DepthConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl DepthConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel;
        DepthConv {
            weight: store.add(
                format!("{name}.weight"),
                he_uniform(&[c_out, c_in, kernel], fan_in, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.depth_conv(x, w, b, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Conv2d {
            weight: store.add(
                format!("{name}.weight"),
                he_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
            ),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
            ),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = ctx.graph.batch_norm_train(x, gamma, beta, BN_EPS);
            let blend = |old: &Tensor, new: &[f64]| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                    .collect();
                Tensor::new(old.shape(), data).unwrap()
            };
            let rm = blend(ctx.store.get(self.running_mean), &stats.mean);
            let rv = blend(ctx.store.get(self.running_var), &stats.var);
            ctx.updates.push((self.running_mean, rm));
            ctx.updates.push((self.running_var, rv));
            y
        } else {
            let rm = ctx.store.get(self.running_mean).data().to_vec();
            let rv = ctx.store.get(self.running_var).data().to_vec();
            ctx.graph.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                lecun_uniform(&[c_out, c_in], c_in, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.linear(x, w, b)
    }
}
