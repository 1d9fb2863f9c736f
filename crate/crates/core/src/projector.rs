//! Learned per-A-scan projection of a preprocessed volume to a 3-channel
//! en-face summary image.
//!
//! Every convolution and pooling acts along depth only, so each output pixel
//! depends on its own A-scan alone. Tensors are laid out `[B, C, D, P]` with
//! `P = X * Z` en-face positions in `x * Z + z` order.

use discover_autograd::nn::{BatchNorm, Ctx, DepthConv};
use discover_autograd::{Graph, ParamStore, PoolKind, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::octa_store::Volume3C;

pub const N_BLOCKS: usize = 3;
pub const IN_CHANNELS: usize = 3;
pub const OUT_CHANNELS: usize = 3;
pub const MIN_DEPTH: usize = 16;
/// Pre-activations are clamped to this magnitude so the sigmoid output
/// never rounds to 0 or 1.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub phi: usize,
    pub use_skip: bool,
    pub kernel_depth: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            phi: 4,
            use_skip: false,
            kernel_depth: 3,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phi == 0 {
            return Err(Error::Config("projector phi must be at least 1".into()));
        }
        if self.kernel_depth % 2 == 0 {
            return Err(Error::Config(format!(
                "projector kernel_depth must be odd, got {}",
                self.kernel_depth
            )));
        }
        Ok(())
    }

    /// Output channels of block `i` (0-based).
    pub fn block_channels(&self, i: usize) -> usize {
        self.phi << i
    }
}

/// Depth after each block: `d -> ceil(ceil(d / 2) / 2)`.
pub fn depth_trace(depth: usize) -> Vec<usize> {
    let mut trace = vec![depth];
    let mut d = depth;
    for _ in 0..N_BLOCKS {
        d = d.div_ceil(2).div_ceil(2);
        trace.push(d);
    }
    trace
}

/// Closed-form trainable parameter count.
pub fn projector_param_count(config: &ProjectorConfig) -> usize {
    let k = config.kernel_depth;
    let mut c_in = IN_CHANNELS;
    let mut total = 0;
    for i in 0..N_BLOCKS {
        let c = config.block_channels(i);
        total += c_in * c * k + c;
        total += c * c * k + c;
        total += 2 * c;
        if config.use_skip {
            total += c_in * c + c;
        }
        c_in = c;
    }
    total + c_in * OUT_CHANNELS + OUT_CHANNELS
}

#[derive(Clone, Debug)]
struct Block {
    pool: PoolKind,
    conv1: DepthConv,
    conv2: DepthConv,
    bn: BatchNorm,
    skip: Option<DepthConv>,
}

#[derive(Clone, Debug)]
pub struct Projector {
    pub config: ProjectorConfig,
    blocks: Vec<Block>,
    dense: DepthConv,
}

impl Projector {
    pub fn new(
        config: ProjectorConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_depth;
        let mut c_in = IN_CHANNELS;
        let mut blocks = Vec::with_capacity(N_BLOCKS);
        for i in 0..N_BLOCKS {
            let c = config.block_channels(i);
            let name = format!("{prefix}.block{}", i + 1);
            blocks.push(Block {
                pool: if i == 0 { PoolKind::Avg } else { PoolKind::Max },
                conv1: DepthConv::new(store, &format!("{name}.conv1"), c_in, c, k, 2, rng),
                conv2: DepthConv::new(store, &format!("{name}.conv2"), c, c, k, 1, rng),
                bn: BatchNorm::new(store, &format!("{name}.bn"), c),
                skip: config
                    .use_skip
                    .then(|| DepthConv::new(store, &format!("{name}.skip"), c_in, c, 1, 4, rng)),
            });
            c_in = c;
        }
        let dense = DepthConv::new(store, &format!("{prefix}.dense"), c_in, OUT_CHANNELS, 1, 1, rng);
        Ok(Projector {
            config,
            blocks,
            dense,
        })
    }

    /// `[B, 3, D, P] -> [B, 3, 1, P]`, values in (0, 1).
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let mut h = x;
        for b in &self.blocks {
            let input = h;
            let p = ctx.graph.depth_pool(input, b.pool);
            let c = b.conv1.forward(ctx, p);
            let c = b.conv2.forward(ctx, c);
            let mut y = b.bn.forward(ctx, c);
            if let Some(skip) = &b.skip {
                let s = skip.forward(ctx, input);
                y = ctx.graph.add(y, s);
            }
            h = ctx.graph.relu(y);
        }
        let m = ctx.graph.mean_depth(h);
        let d = self.dense.forward(ctx, m);
        let d = ctx.graph.clamp(d, -LOGIT_CLAMP, LOGIT_CLAMP);
        ctx.graph.sigmoid(d)
    }

    /// Forward to a `[B, 3, X, Z]` image.
    pub fn forward_image(&self, ctx: &mut Ctx, x: Var, en_face: [usize; 2]) -> Var {
        let b = ctx.graph.shape(x)[0];
        let out = self.forward(ctx, x);
        ctx.graph.reshape(out, &[b, OUT_CHANNELS, en_face[0], en_face[1]])
    }
}

/// Stacks volumes `(c, x, y, z)` into a `[B, 3, Y, X * Z]` tensor.
pub fn volumes_to_tensor(volumes: &[&Volume3C]) -> Result<Tensor> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Validation("empty volume batch".into()))?;
    let [nx, ny, nz] = first.dims;
    let p = nx * nz;
    let per = IN_CHANNELS * ny * p;
    let mut data = vec![0.0; volumes.len() * per];
    for (b, v) in volumes.iter().enumerate() {
        if v.dims != first.dims || v.channels != IN_CHANNELS {
            return Err(Error::Validation(format!(
                "volume dims {:?} x {} differ from batch dims {:?} x {IN_CHANNELS}",
                v.dims, v.channels, first.dims
            )));
        }
        let dst = &mut data[b * per..(b + 1) * per];
        for c in 0..IN_CHANNELS {
            for x in 0..nx {
                for y in 0..ny {
                    let src = v.index(c, x, y, 0);
                    let o = (c * ny + y) * p + x * nz;
                    for z in 0..nz {
                        dst[o + z] = v.data[src + z] as f64;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[volumes.len(), IN_CHANNELS, ny, p], data).expect("sized above"))
}

/// Three-channel en-face image `(c, x, z)` with values in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryImage {
    pub dims: [usize; 2],
    pub data: Vec<f64>,
}

impl SummaryImage {
    pub fn get(&self, c: usize, x: usize, z: usize) -> f64 {
        self.data[(c * self.dims[0] + x) * self.dims[1] + z]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[OUT_CHANNELS, self.dims[0], self.dims[1]], self.data.clone())
            .expect("summary shape")
    }

    /// Interleaved 8-bit RGB, rows along x, columns along z.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let [nx, nz] = self.dims;
        let mut out = Vec::with_capacity(3 * nx * nz);
        for x in 0..nx {
            for z in 0..nz {
                for c in 0..OUT_CHANNELS {
                    out.push((255.0 * self.get(c, x, z)).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }
}

/// Evaluation-mode projection of one volume.
pub fn projector_forward(
    volume: &Volume3C,
    projector: &Projector,
    store: &ParamStore,
) -> Result<SummaryImage> {
    let [nx, ny, nz] = volume.dims;
    if ny < MIN_DEPTH {
        return Err(Error::Validation(format!(
            "volume depth {ny} below the minimum of {MIN_DEPTH}"
        )));
    }
    let mut graph = Graph::new();
    let x = graph.constant(volumes_to_tensor(&[volume])?);
    let mut ctx = Ctx::new(&mut graph, store, false, false);
    let out = projector.forward(&mut ctx, x);
    let data = graph.value(out).data().to_vec();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite projector output".into()));
    }
    Ok(SummaryImage {
        dims: [nx, nz],
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn depth_trace_uses_ceil_division() {
        assert_eq!(depth_trace(224), vec![224, 56, 14, 4]);
        assert_eq!(depth_trace(56), vec![56, 14, 4, 1]);
        assert_eq!(depth_trace(17), vec![17, 5, 2, 1]);
    }

    #[test]
    fn param_count_matches_instantiated_network() {
        for phi in [1, 2, 4, 8] {
            for use_skip in [false, true] {
                for kernel_depth in [1, 3, 5] {
                    let cfg = ProjectorConfig {
                        phi,
                        use_skip,
                        kernel_depth,
                    };
                    let mut store = ParamStore::new();
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    Projector::new(cfg, &mut store, "proj", &mut rng).unwrap();
                    assert_eq!(store.trainable_count(), projector_param_count(&cfg));
                }
            }
        }
    }

    #[test]
    fn rejects_even_kernel_and_zero_phi() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let even = ProjectorConfig {
            kernel_depth: 4,
            ..Default::default()
        };
        assert!(Projector::new(even, &mut store, "p", &mut rng).is_err());
        let zero = ProjectorConfig {
            phi: 0,
            ..Default::default()
        };
        assert!(Projector::new(zero, &mut store, "p", &mut rng).is_err());
    }

    #[test]
    fn shallow_volume_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Projector::new(ProjectorConfig::default(), &mut store, "p", &mut rng).unwrap();
        let v = Volume3C::zeros(3, [2, 15, 2]);
        assert!(projector_forward(&v, &p, &store).is_err());
    }
}
