//! Tape of operations recorded during a forward pass and replayed in reverse.
//!
//! A [`Graph`] is built once per forward pass. Operations panic on shape
//! mismatches, which are programming errors rather than data errors.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use crate::kernels::{self, Conv2dGeom, DepthConvGeom, PoolKind, ResampleMap};
use crate::{ParamId, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule applied at ReLU nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReluRule {
    /// Exact derivative: pass the gradient where the input is positive.
    #[default]
    Gradient,
    /// Deconvolution: rectify the incoming gradient, ignore the forward input.
    Deconv,
    /// Guided backpropagation: pass only positive gradients at positive inputs.
    Guided,
    /// DeepLIFT rescale rule against reference activations.
    DeepLift,
}

#[derive(Debug)]
enum BnCache {
    Train { xhat: Vec<f64>, inv_std: Vec<f64> },
    Eval { inv_std: Vec<f64>, mean: Vec<f64> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu { x: Var, reference: Option<Tensor> },
    Sigmoid(Var),
    Logit { x: Var, eps: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    DepthConv { x: Var, w: Var, b: Var, geom: DepthConvGeom },
    DepthPool { x: Var, kind: PoolKind, arg: Vec<u8> },
    MeanDepth(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: BnCache },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    Resample { x: Var, maps: Vec<Arc<ResampleMap>> },
    Pick { x: Var, index: Vec<usize> },
    Bce { p: Var, labels: Vec<f64>, eps: f64 },
    Mean(Var),
    WeightedSum { x: Var, weights: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    relu_rule: ReluRule,
    record_relu: bool,
    relu_log: Vec<Tensor>,
    relu_refs: VecDeque<Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_relu_rule(rule: ReluRule) -> Self {
        Graph {
            relu_rule: rule,
            ..Self::default()
        }
    }

    /// Records ReLU inputs so they can serve as DeepLIFT references.
    pub fn recording_relu_inputs() -> Self {
        Graph {
            record_relu: true,
            ..Self::default()
        }
    }

    /// DeepLIFT graph whose ReLU nodes consume `references` in creation order.
    pub fn deeplift(references: Vec<Tensor>) -> Self {
        Graph {
            relu_rule: ReluRule::DeepLift,
            relu_refs: references.into(),
            ..Self::default()
        }
    }

    pub fn take_relu_log(&mut self) -> Vec<Tensor> {
        std::mem::take(&mut self.relu_log)
    }

    pub fn relu_rule(&self) -> ReluRule {
        self.relu_rule
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted (e.g. for attribution).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape size");
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        if self.record_relu {
            let input = self.value(x).clone();
            self.relu_log.push(input);
        }
        let reference = if self.relu_rule == ReluRule::DeepLift {
            let r = self
                .relu_refs
                .pop_front()
                .expect("DeepLIFT graph ran out of reference activations");
            assert_eq!(r.shape(), self.shape(x), "DeepLIFT reference shape mismatch");
            Some(r)
        } else {
            None
        };
        self.push(value, Op::Relu { x, reference }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// `ln(p / (1 - p))` after clamping `p` to `[eps, 1 - eps]`.
    pub fn logit(&mut self, x: Var, eps: f64) -> Var {
        let value = self.value(x).map(|p| {
            let p = p.clamp(eps, 1.0 - eps);
            (p / (1.0 - p)).ln()
        });
        self.push(value, Op::Logit { x, eps }, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { x, lo, hi }, &[x])
    }

    /// 1-D convolution along the depth axis of `[B, Cin, D, P]` with weights
    /// `[Cout, Cin, K]`, ceil-mode stride and "same" zero padding.
    pub fn depth_conv(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "depth_conv expects [B, C, D, P]");
        assert_eq!(ws.len(), 3, "depth_conv weights expect [Cout, Cin, K]");
        assert_eq!(xs[1], ws[1], "depth_conv channel mismatch");
        assert_eq!(self.shape(b), &[ws[0]]);
        let d_out = kernels::strided_len(xs[2], stride);
        let geom = DepthConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            d_in: xs[2],
            d_out,
            positions: xs[3],
            kernel: ws[2],
            stride,
            pad: kernels::same_pad(xs[2], d_out, ws[2], stride),
        };
        let out = kernels::depth_conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(&[xs[0], ws[0], d_out, xs[3]], out).expect("depth_conv shape");
        self.push(value, Op::DepthConv { x, w, b, geom }, &[x, w, b])
    }

    /// Window-2 stride-2 ceil-mode pooling along depth of `[B, C, D, P]`.
    pub fn depth_pool(&mut self, x: Var, kind: PoolKind) -> Var {
        let s = self.shape(x).to_vec();
        let (out, arg) =
            kernels::depth_pool_forward(self.value(x).data(), s[0] * s[1], s[2], s[3], kind);
        let d_out = kernels::strided_len(s[2], 2);
        let value = Tensor::new(&[s[0], s[1], d_out, s[3]], out).expect("pool shape");
        self.push(value, Op::DepthPool { x, kind, arg }, &[x])
    }

    /// Mean over the depth axis: `[B, C, D, P] -> [B, C, 1, P]`.
    pub fn mean_depth(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (rows, d, p) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * p];
        for r in 0..rows {
            let o = &mut out[r * p..(r + 1) * p];
            for k in 0..d {
                let row = &src[(r * d + k) * p..(r * d + k + 1) * p];
                for (a, b) in o.iter_mut().zip(row) {
                    *a += b;
                }
            }
            let inv = 1.0 / d as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(&[s[0], s[1], 1, p], out).expect("mean shape");
        self.push(value, Op::MeanDepth(x), &[x])
    }

    /// 2-D convolution of `[B, Cin, H, W]` with weights `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects [B, C, H, W]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = Conv2dGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(&[xs[0], ws[0], geom.out_h(), geom.out_w()], out)
            .expect("conv2d shape");
        self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// Training-mode batch normalization over every axis but axis 1.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, BatchStats) {
        let s = self.shape(x).to_vec();
        let (batch, ch) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let xv = self.value(x).data();
        let (mean, var) = kernels::channel_stats(xv, batch, ch, inner);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let o = (b * ch + c) * inner;
                for i in o..o + inner {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let count = (batch * inner) as f64;
        let unbiased = var
            .iter()
            .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
            .collect();
        let stats = BatchStats {
            mean,
            var: unbiased,
        };
        let value = Tensor::new(&s, out).expect("bn shape");
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache: BnCache::Train { xhat, inv_std },
            },
            &[x, gamma, beta],
        );
        (var, stats)
    }

    /// Evaluation-mode batch normalization with frozen statistics. Each
    /// element is transformed independently.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let s = self.shape(x).to_vec();
        let (batch, ch) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let o = (b * ch + c) * inner;
                for i in o..o + inner {
                    out[i] = g[c] * ((xv[i] - running_mean[c]) * inv_std[c]) + bt[c];
                }
            }
        }
        let value = Tensor::new(&s, out).expect("bn shape");
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache: BnCache::Eval {
                    inv_std,
                    mean: running_mean.to_vec(),
                },
            },
            &[x, gamma, beta],
        )
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let inner = s[2] * s[3];
        let src = self.value(x).data();
        let out = (0..s[0] * s[1])
            .map(|r| src[r * inner..(r + 1) * inner].iter().sum::<f64>() / inner as f64)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], out).expect("gap shape");
        self.push(value, Op::GlobalAvgPool(x), &[x])
    }

    /// `[B, Cin] x [Cout, Cin]^T + b -> [B, Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs[1], ws[1], "linear feature mismatch");
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; xs[0] * ws[0]];
        for i in 0..xs[0] {
            for o in 0..ws[0] {
                let mut s = bv[o];
                for k in 0..xs[1] {
                    s += wv[o * ws[1] + k] * xv[i * xs[1] + k];
                }
                out[i * ws[0] + o] = s;
            }
        }
        let value = Tensor::new(&[xs[0], ws[0]], out).expect("linear shape");
        self.push(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Applies one resampling map per batch item to `[B, C, H, W]`.
    pub fn resample(&mut self, x: Var, maps: Vec<Arc<ResampleMap>>) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(maps.len(), s[0], "one resample map per batch item");
        let (oh, ow) = (maps[0].out_h, maps[0].out_w);
        let (in_plane, out_plane) = (s[2] * s[3], oh * ow);
        let src = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * out_plane];
        for (b, m) in maps.iter().enumerate() {
            assert_eq!((m.in_h, m.in_w), (s[2], s[3]), "resample input size");
            assert_eq!((m.out_h, m.out_w), (oh, ow), "resample output size");
            for c in 0..s[1] {
                let r = b * s[1] + c;
                m.apply(
                    &src[r * in_plane..(r + 1) * in_plane],
                    &mut out[r * out_plane..(r + 1) * out_plane],
                );
            }
        }
        let value = Tensor::new(&[s[0], s[1], oh, ow], out).expect("resample shape");
        self.push(value, Op::Resample { x, maps }, &[x])
    }

    /// Gathers flat elements of `x` into a tensor of `shape`.
    pub fn pick(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        let out = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, out).expect("pick shape");
        self.push(value, Op::Pick { x, index }, &[x])
    }

    /// Mean binary cross-entropy; probabilities are clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, labels: &[f64], eps: f64) -> Var {
        let pv = self.value(p).data();
        assert_eq!(pv.len(), labels.len(), "bce label count");
        let n = pv.len() as f64;
        let total: f64 = pv
            .iter()
            .zip(labels)
            .map(|(&q, &l)| {
                let q = q.clamp(eps, 1.0 - eps);
                l * q.ln() + (1.0 - l) * (1.0 - q).ln()
            })
            .sum();
        let value = Tensor::scalar(-total / n);
        self.push(
            value,
            Op::Bce {
                p,
                labels: labels.to_vec(),
                eps,
            },
            &[p],
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// `sum_i weights_i * x_i`, a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Var {
        assert_eq!(self.value(x).len(), weights.len(), "weighted_sum length");
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x])
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.backward_with(root, Tensor::full(self.shape(root), 1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.shape(root), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                let g = gy.clone().reshape(self.shape(*x)).expect("reshape back");
                acc(*x, g, grads);
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone(), grads);
                acc(*b, gy.clone(), grads);
            }
            Op::Scale(x, c) => acc(*x, gy.map(|g| g * c), grads),
            Op::Relu { x, reference } => {
                let xv = self.value(*x).data();
                let data: Vec<f64> = match self.relu_rule {
                    ReluRule::Gradient => xv
                        .iter()
                        .zip(gy.data())
                        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                        .collect(),
                    ReluRule::Deconv => gy.data().iter().map(|g| g.max(0.0)).collect(),
                    ReluRule::Guided => xv
                        .iter()
                        .zip(gy.data())
                        .map(|(&a, &g)| if a > 0.0 && g > 0.0 { g } else { 0.0 })
                        .collect(),
                    ReluRule::DeepLift => {
                        let r = reference.as_ref().expect("DeepLIFT reference");
                        xv.iter()
                            .zip(r.data())
                            .zip(gy.data())
                            .map(|((&a, &a0), &g)| {
                                let dx = a - a0;
                                if dx.abs() > 1e-12 {
                                    g * (a.max(0.0) - a0.max(0.0)) / dx
                                } else if a > 0.0 {
                                    g
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    }
                };
                acc(*x, Tensor::new(gy.shape(), data).unwrap(), grads);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let data = y
                    .iter()
                    .zip(gy.data())
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                acc(*x, Tensor::new(gy.shape(), data).unwrap(), grads);
            }
            Op::Logit { x, eps } => {
                let xv = self.value(*x).data();
                let data = xv
                    .iter()
                    .zip(gy.data())
                    .map(|(&p, &g)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            g / (p * (1.0 - p))
                        }
                    })
                    .collect();
                acc(*x, Tensor::new(gy.shape(), data).unwrap(), grads);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let data = xv
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v < *lo || v > *hi { 0.0 } else { g })
                    .collect();
                acc(*x, Tensor::new(gy.shape(), data).unwrap(), grads);
            }
            Op::DepthConv { x, w, b, geom } => {
                let need_dx = self.nodes[x.0].needs_grad;
                let (dx, dw, db) = kernels::depth_conv_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy.data(),
                    geom,
                    need_dx,
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.shape(*x), dx).unwrap(), grads);
                }
                acc(*w, Tensor::new(self.shape(*w), dw).unwrap(), grads);
                acc(*b, Tensor::new(self.shape(*b), db).unwrap(), grads);
            }
            Op::DepthPool { x, kind, arg } => {
                let s = self.shape(*x);
                let dx =
                    kernels::depth_pool_backward(gy.data(), s[0] * s[1], s[2], s[3], *kind, arg);
                acc(*x, Tensor::new(s, dx).unwrap(), grads);
            }
            Op::MeanDepth(x) => {
                let s = self.shape(*x).to_vec();
                let (rows, d, p) = (s[0] * s[1], s[2], s[3]);
                let inv = 1.0 / d as f64;
                let mut dx = vec![0.0; rows * d * p];
                for r in 0..rows {
                    let g = &gy.data()[r * p..(r + 1) * p];
                    for k in 0..d {
                        let o = &mut dx[(r * d + k) * p..(r * d + k + 1) * p];
                        for (a, b) in o.iter_mut().zip(g) {
                            *a = b * inv;
                        }
                    }
                }
                acc(*x, Tensor::new(&s, dx).unwrap(), grads);
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_dx = self.nodes[x.0].needs_grad;
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy.data(),
                    geom,
                    need_dx,
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.shape(*x), dx).unwrap(), grads);
                }
                acc(*w, Tensor::new(self.shape(*w), dw).unwrap(), grads);
                acc(*b, Tensor::new(self.shape(*b), db).unwrap(), grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let s = self.shape(*x).to_vec();
                let (batch, ch) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let g = gy.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                let mut dx = vec![0.0; g.len()];
                match cache {
                    BnCache::Train { xhat, inv_std } => {
                        let count = (batch * inner) as f64;
                        for c in 0..ch {
                            let (mut sg, mut sgx) = (0.0, 0.0);
                            for b in 0..batch {
                                let o = (b * ch + c) * inner;
                                for i in o..o + inner {
                                    sg += g[i];
                                    sgx += g[i] * xhat[i];
                                }
                            }
                            dgamma[c] = sgx;
                            dbeta[c] = sg;
                            let k = gam[c] * inv_std[c];
                            for b in 0..batch {
                                let o = (b * ch + c) * inner;
                                for i in o..o + inner {
                                    dx[i] = k * (g[i] - sg / count - xhat[i] * sgx / count);
                                }
                            }
                        }
                    }
                    BnCache::Eval { inv_std, mean } => {
                        let xv = self.value(*x).data();
                        for c in 0..ch {
                            let k = gam[c] * inv_std[c];
                            for b in 0..batch {
                                let o = (b * ch + c) * inner;
                                for i in o..o + inner {
                                    dgamma[c] += g[i] * (xv[i] - mean[c]) * inv_std[c];
                                    dbeta[c] += g[i];
                                    dx[i] = k * g[i];
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(&s, dx).unwrap(), grads);
                acc(*gamma, Tensor::new(&[ch], dgamma).unwrap(), grads);
                acc(*beta, Tensor::new(&[ch], dbeta).unwrap(), grads);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let inner = s[2] * s[3];
                let inv = 1.0 / inner as f64;
                let mut dx = vec![0.0; s.iter().product()];
                for (r, g) in gy.data().iter().enumerate() {
                    dx[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .for_each(|v| *v = g * inv);
                }
                acc(*x, Tensor::new(&s, dx).unwrap(), grads);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (xv, wv, g) = (self.value(*x).data(), self.value(*w).data(), gy.data());
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; ws[0]];
                for i in 0..xs[0] {
                    for o in 0..ws[0] {
                        let gv = g[i * ws[0] + o];
                        db[o] += gv;
                        for k in 0..xs[1] {
                            dw[o * ws[1] + k] += gv * xv[i * xs[1] + k];
                            dx[i * xs[1] + k] += gv * wv[o * ws[1] + k];
                        }
                    }
                }
                acc(*x, Tensor::new(&xs, dx).unwrap(), grads);
                acc(*w, Tensor::new(&ws, dw).unwrap(), grads);
                acc(*b, Tensor::new(&[ws[0]], db).unwrap(), grads);
            }
            Op::Resample { x, maps } => {
                let s = self.shape(*x).to_vec();
                let in_plane = s[2] * s[3];
                let out_plane = maps[0].out_h * maps[0].out_w;
                let mut dx = vec![0.0; s.iter().product()];
                for (b, m) in maps.iter().enumerate() {
                    for c in 0..s[1] {
                        let r = b * s[1] + c;
                        m.apply_transpose(
                            &gy.data()[r * out_plane..(r + 1) * out_plane],
                            &mut dx[r * in_plane..(r + 1) * in_plane],
                        );
                    }
                }
                acc(*x, Tensor::new(&s, dx).unwrap(), grads);
            }
            Op::Pick { x, index } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (&i, g) in index.iter().zip(gy.data()) {
                    dx.data_mut()[i] += g;
                }
                acc(*x, dx, grads);
            }
            Op::Bce { p, labels, eps } => {
                let pv = self.value(*p).data();
                let n = pv.len() as f64;
                let g0 = gy.item();
                let data = pv
                    .iter()
                    .zip(labels)
                    .map(|(&q, &l)| {
                        if q < *eps || q > 1.0 - eps {
                            0.0
                        } else {
                            -g0 / n * (l / q - (1.0 - l) / (1.0 - q))
                        }
                    })
                    .collect();
                acc(*p, Tensor::new(self.shape(*p), data).unwrap(), grads);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, Tensor::full(self.shape(*x), gy.item() / n), grads);
            }
            Op::WeightedSum { x, weights } => {
                let g0 = gy.item();
                let dx = weights.map(|w| w * g0).reshape(self.shape(*x)).unwrap();
                acc(*x, dx, grads);
            }
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter reached by the pass, summed
    /// over repeated uses of the same parameter.
    pub fn params(&self, graph: &Graph) -> BTreeMap<ParamId, Tensor> {
        let mut out: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (i, g) in self.grads.iter().enumerate() {
            let (Some(g), Some(id)) = (g, graph.nodes[i].param) else {
                continue;
            };
            match out.get_mut(&id) {
                Some(t) => t.add_assign(g),
                None => {
                    out.insert(id, g.clone());
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
