//! Gradient attributions over the summary image and attribution-driven
//! B-scan selection.

use discover_autograd::nn::Ctx;
use discover_autograd::{Graph, ParamStore, ReluRule, Tensor, Var};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{DropoutMask, Ensemble};
use crate::error::{Error, Result};
use crate::octa_store::Volume3C;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Saliency,
    Deconv,
    #[default]
    GuidedBackprop,
    Deeplift,
}

impl std::str::FromStr for AttributionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saliency" => Ok(Self::Saliency),
            "deconv" => Ok(Self::Deconv),
            "guided_backprop" => Ok(Self::GuidedBackprop),
            "deeplift" => Ok(Self::Deeplift),
            _ => Err(Error::Validation(format!("unknown attribution method '{s}'"))),
        }
    }
}

/// A differentiable classifier mapping `[1, C, H, W]` to `[1, N]` logits.
pub trait Classifier {
    fn logits(&self, graph: &mut Graph, x: Var) -> Var;
}

/// An ensemble in inference configuration: frozen normalization
/// statistics, every member active, no transform.
pub struct EvalEnsemble<'a> {
    pub ensemble: &'a Ensemble,
    pub store: &'a ParamStore,
}

impl Classifier for EvalEnsemble<'_> {
    fn logits(&self, graph: &mut Graph, x: Var) -> Var {
        let k = self.ensemble.len();
        let mut ctx = Ctx::new(graph, self.store, false, false);
        let maps = vec![None; k];
        self.ensemble
            .forward(&mut ctx, x, &DropoutMask::full(k), &maps)
            .logit
    }
}

impl<F: Fn(&mut Graph, Var) -> Var> Classifier for F {
    fn logits(&self, graph: &mut Graph, x: Var) -> Var {
        self(graph, x)
    }
}

/// Per-pixel attributions `[C, H, W]` of every output, from one forward
/// pass and one backward pass per output.
pub fn attribute_all(
    image: &Tensor,
    classifier: &impl Classifier,
    method: AttributionMethod,
) -> Result<Vec<Tensor>> {
    let shape = [1, image.dim(0), image.dim(1), image.dim(2)];
    let mut graph = match method {
        AttributionMethod::Saliency => Graph::new(),
        AttributionMethod::Deconv => Graph::with_relu_rule(ReluRule::Deconv),
        AttributionMethod::GuidedBackprop => Graph::with_relu_rule(ReluRule::Guided),
        AttributionMethod::Deeplift => {
            let mut reference = Graph::recording_relu_inputs();
            let zero = reference.constant(Tensor::zeros(&shape));
            classifier.logits(&mut reference, zero);
            Graph::deeplift(reference.take_relu_log())
        }
    };
    let x = graph.input(image.clone().reshape(&shape).expect("same size"));
    let out = classifier.logits(&mut graph, x);
    let n_out = graph.shape(out)[1];
    let mut maps = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let mut seed = Tensor::zeros(&[1, n_out]);
        seed.data_mut()[n] = 1.0;
        let grads = graph.backward_with(out, seed);
        let g = grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&shape));
        let mut a = g.reshape(image.shape()).expect("same size");
        if method == AttributionMethod::Deeplift {
            // Multiplier times difference from the all-zero reference.
            for (ai, xi) in a.data_mut().iter_mut().zip(image.data()) {
                *ai *= xi;
            }
        }
        if !a.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite attribution for output {n}"
            )));
        }
        maps.push(a);
    }
    Ok(maps)
}

/// Attribution of a single output.
pub fn attribute(
    image: &Tensor,
    classifier: &impl Classifier,
    method: AttributionMethod,
    n: usize,
) -> Result<Tensor> {
    let mut all = attribute_all(image, classifier, method)?;
    if n >= all.len() {
        return Err(Error::Validation(format!(
            "output {n} out of range for {} outputs",
            all.len()
        )));
    }
    Ok(all.swap_remove(n))
}

/// Normalized per-B-scan scores, `alpha[n][z]`, from `[C, X, Z]` maps.
pub fn ascan_attribution(a: &[Tensor]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|t| {
            let (c, nx, nz) = (t.dim(0), t.dim(1), t.dim(2));
            let mut s = vec![0.0; nz];
            for ci in 0..c {
                for x in 0..nx {
                    let row = &t.data()[(ci * nx + x) * nz..(ci * nx + x + 1) * nz];
                    for (acc, v) in s.iter_mut().zip(row) {
                        *acc += v.abs();
                    }
                }
            }
            let total: f64 = s.iter().sum();
            if total > 0.0 {
                s.iter().map(|v| v / total).collect()
            } else {
                vec![1.0 / nz as f64; nz]
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    /// Per output, `[3, X, Z]`.
    pub a: Vec<Tensor>,
    /// Per output, normalized over z.
    pub alpha: Vec<Vec<f64>>,
}

pub fn attribution_map(
    image: &Tensor,
    classifier: &impl Classifier,
    method: AttributionMethod,
) -> Result<AttributionMap> {
    let a = attribute_all(image, classifier, method)?;
    let alpha = ascan_attribution(&a);
    Ok(AttributionMap { a, alpha })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    /// Highest score, lowest index on ties.
    Inference,
    /// One multinomial draw per output.
    Training,
}

pub fn select_indices(alpha: &[Vec<f64>], mode: SelectMode, rng: &mut impl Rng) -> Result<Vec<usize>> {
    alpha
        .iter()
        .map(|row| match mode {
            SelectMode::Inference => {
                let mut best = 0;
                for (z, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = z;
                    }
                }
                Ok(best)
            }
            SelectMode::Training => {
                let dist = WeightedIndex::new(row)
                    .map_err(|e| Error::Numerical(format!("invalid slice distribution: {e}")))?;
                Ok(dist.sample(rng))
            }
        })
        .collect()
}

/// B-scan `z` as a `[3, X, Y]` tensor.
pub fn extract_bscan(volume: &Volume3C, z: usize) -> Tensor {
    let [nx, ny, _] = volume.dims;
    let mut data = Vec::with_capacity(volume.channels * nx * ny);
    for c in 0..volume.channels {
        for x in 0..nx {
            for y in 0..ny {
                data.push(volume.get(c, x, y, z) as f64);
            }
        }
    }
    Tensor::new(&[volume.channels, nx, ny], data).expect("sized above")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectedBScans {
    pub z_indices: Vec<usize>,
    /// Per output, `[3, X, Y1]`.
    pub slices: Vec<Tensor>,
}

pub fn select_bscans(
    volume: &Volume3C,
    alpha: &[Vec<f64>],
    mode: SelectMode,
    rng: &mut impl Rng,
) -> Result<SelectedBScans> {
    let nz = volume.dims[2];
    if let Some(row) = alpha.iter().find(|r| r.len() != nz) {
        return Err(Error::Validation(format!(
            "attribution over {} slices for a volume with Z = {nz}",
            row.len()
        )));
    }
    let z_indices = select_indices(alpha, mode, rng)?;
    let slices = z_indices.iter().map(|&z| extract_bscan(volume, z)).collect();
    Ok(SelectedBScans { z_indices, slices })
}
