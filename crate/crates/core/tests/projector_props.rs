mod common;

use discover_autograd::ParamStore;
use discover_core::octa_store::Volume3C;
use discover_core::projector::{depth_trace, projector_forward, projector_param_count, Projector, ProjectorConfig};
use discover_core::synthgen::{generate_phantom, PhantomSpec};
use discover_core::preprocess::{preprocess_bundle, PreprocessConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(config: ProjectorConfig, seed: u64) -> (Projector, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = Projector::new(config, &mut store, "proj", &mut rng).unwrap();
    common::jitter(&mut store, &mut rng);
    (p, store)
}

fn permute(v: &Volume3C, perm: &[usize]) -> Volume3C {
    let [_, ny, nz] = v.dims;
    let mut out = v.clone();
    for (src, &dst) in perm.iter().enumerate() {
        for c in 0..v.channels {
            for y in 0..ny {
                out.set(c, dst / nz, y, dst % nz, v.get(c, src / nz, y, src % nz));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ascan_permutation_commutes_bit_exactly(seed in any::<u64>(), use_skip in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ProjectorConfig { phi: 3, use_skip, kernel_depth: 3 };
        let (p, store) = build(config, seed);
        let v = common::random_volume([5, 20, 3], &mut rng);
        let mut perm: Vec<usize> = (0..15).collect();
        perm.shuffle(&mut rng);
        let base = projector_forward(&v, &p, &store).unwrap();
        let moved = projector_forward(&permute(&v, &perm), &p, &store).unwrap();
        for (src, &dst) in perm.iter().enumerate() {
            for c in 0..3 {
                prop_assert_eq!(
                    moved.get(c, dst / 3, dst % 3).to_bits(),
                    base.get(c, src / 3, src % 3).to_bits()
                );
            }
        }
    }

    #[test]
    fn output_is_strictly_inside_unit_interval(seed in any::<u64>(), gain in 0.0f32..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, store) = build(ProjectorConfig::default(), seed);
        let mut v = common::random_volume([3, 16, 3], &mut rng);
        v.data.iter_mut().for_each(|x| *x *= gain);
        let s = projector_forward(&v, &p, &store).unwrap();
        prop_assert!(s.data.iter().all(|x| *x > 0.0 && *x < 1.0));
    }
}

#[test]
fn evaluation_forward_is_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (p, store) = build(ProjectorConfig::default(), 4);
    let v = common::random_volume([4, 24, 4], &mut rng);
    let a = projector_forward(&v, &p, &store).unwrap();
    let b = projector_forward(&v, &p, &store).unwrap();
    assert_eq!(a, b);
}

#[test]
fn parameter_count_at_unit_width_matches_hand_enumeration() {
    // Blocks of widths 1, 2, 4 with kernel 1: two convs and a batch norm each.
    let block1 = (3 + 1) + (1 + 1) + 2;
    let block2 = (2 + 2) + (4 + 2) + 4;
    let block3 = (8 + 4) + (16 + 4) + 8;
    let dense = 4 * 3 + 3;
    let config = ProjectorConfig { phi: 1, use_skip: false, kernel_depth: 1 };
    assert_eq!(projector_param_count(&config), block1 + block2 + block3 + dense);
    assert_eq!(projector_param_count(&config), 77);
    let mut store = ParamStore::new();
    Projector::new(config, &mut store, "proj", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(store.trainable_count(), 77);
}

#[test]
fn width_doubling_roughly_quadruples_conv_parameters() {
    let count = |phi| projector_param_count(&ProjectorConfig { phi, ..ProjectorConfig::default() }) as f64;
    let ratio = count(64) / count(32);
    assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn reference_width_gives_block_channels_8_16_32() {
    let config = ProjectorConfig { phi: 8, ..ProjectorConfig::default() };
    let mut store = ParamStore::new();
    Projector::new(config, &mut store, "proj", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (i, c) in [8, 16, 32].into_iter().enumerate() {
        let id = store.find(&format!("proj.block{}.conv2.weight", i + 1)).unwrap();
        assert_eq!(store.get(id).shape()[0], c);
    }
    assert_eq!(depth_trace(224), vec![224, 56, 14, 4]);
    let (p, store) = build(config, 1);
    let s = projector_forward(&Volume3C::zeros(3, [2, 224, 3]), &p, &store).unwrap();
    assert_eq!(s.dims, [2, 3]);
    assert_eq!(s.data.len(), 3 * 2 * 3);
}

#[test]
fn desk_volume_projects_to_64_by_64() {
    let b = generate_phantom(&PhantomSpec::new([64, 96, 64], 2, 1)).unwrap().bundle;
    let v = preprocess_bundle(&b, PreprocessConfig::default()).unwrap().volume;
    let (p, store) = build(ProjectorConfig::default(), 2);
    let s = projector_forward(&v, &p, &store).unwrap();
    assert_eq!(s.dims, [64, 64]);
    assert!(s.data.iter().all(|x| *x > 0.0 && *x < 1.0));
}
