//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use discover_autograd::{ParamKind, ParamStore, Tensor};
use discover_core::ensemble::{BackboneSpec, EnsembleConfig};
use discover_core::fusion_train::{ModelConfig, Sample};
use discover_core::octa_store::{encode_labels, Volume3C};
use discover_core::projector::ProjectorConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_ensemble(members: usize) -> EnsembleConfig {
    EnsembleConfig {
        members: (0..members)
            .map(|k| BackboneSpec::new(&format!("t{k}"), 2 + k % 2, false))
            .collect(),
        ..EnsembleConfig::default()
    }
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        projector: ProjectorConfig {
            phi: 2,
            ..ProjectorConfig::default()
        },
        c1: tiny_ensemble(2),
        c2: tiny_ensemble(2),
        ..ModelConfig::default()
    }
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn random_volume(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Volume3C {
    let mut v = Volume3C::zeros(3, dims);
    v.data.iter_mut().for_each(|x| *x = rng.gen_range(0.0..1.0));
    v
}

pub fn sample(id: &str, grade: u8, volume: Volume3C) -> Sample {
    Sample {
        id: id.into(),
        volume,
        labels: encode_labels(grade).unwrap(),
    }
}

/// Moves every parameter away from its initialization, including the
/// normalization statistics, so checks do not rely on special values.
pub fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let kind = store.kind(id);
        for v in store.get_mut(id).data_mut() {
            *v = match kind {
                ParamKind::Buffer if name.ends_with("running_var") => rng.gen_range(0.5..1.5),
                ParamKind::Buffer => rng.gen_range(-0.2..0.2),
                ParamKind::Trainable => *v + rng.gen_range(-0.2..0.2),
            };
        }
    }
}
