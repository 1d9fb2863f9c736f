mod common;

use discover_autograd::nn::Ctx;
use discover_autograd::{sigmoid, Graph, ParamStore, Tensor};
use discover_core::ensemble::{
    aggregate, apply_transform, draw_dropout_mask, ensemble_forward, AugmentParams, AvgMode, DropoutMask, Ensemble,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn build(members: usize, seed: u64) -> (Ensemble, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let e = Ensemble::new(common::tiny_ensemble(members), 3, &mut store, "c1", &mut rng).unwrap();
    common::jitter(&mut store, &mut rng);
    (e, store)
}

/// Logits of member `k` on an already-transformed image.
fn member_logits(e: &Ensemble, store: &ParamStore, k: usize, image: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(image.clone().reshape(&[1, image.dim(0), image.dim(1), image.dim(2)]).unwrap());
    let mut ctx = Ctx::new(&mut g, store, false, false);
    let out = e.member_logits(&mut ctx, k, x, None);
    g.value(out).data().to_vec()
}

fn some_augs(k: usize) -> Vec<AugmentParams> {
    (0..k)
        .map(|i| AugmentParams {
            rotation_deg: 3.0 * i as f64 - 4.0,
            translate: [0.02 * i as f64, -0.05],
            scale: 0.95 + 0.04 * i as f64,
            hflip: i % 2 == 1,
        })
        .collect()
}

#[test]
fn forward_equals_hand_composed_formula_in_both_modes() {
    let (e, store) = build(3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = common::random_tensor(&[3, 12, 10], 0.0, 1.0, &mut rng);
    let augs = some_augs(3);
    for bits in 1u64..8 {
        let mask = DropoutMask { delta: (0..3).map(|i| bits >> i & 1 == 1).collect() };
        let logits: Vec<Vec<f64>> = (0..3)
            .map(|k| member_logits(&e, &store, k, &apply_transform(&image, &augs[k])))
            .collect();
        for mode in [AvgMode::Logit, AvgMode::Probability] {
            let p = ensemble_forward(&image, &e, &store, &mask, &augs, mode).unwrap();
            for n in 0..4 {
                let active: Vec<f64> = mask.active().map(|k| logits[k][n]).collect();
                let m = active.len() as f64;
                let expected = match mode {
                    AvgMode::Logit => sigmoid(active.iter().sum::<f64>() / m),
                    AvgMode::Probability => active.iter().map(|&l| sigmoid(l)).sum::<f64>() / m,
                };
                assert!((p[n] - expected).abs() < 1e-6, "mask {bits:03b} {mode:?} n {n}");
            }
        }
    }
    let empty = DropoutMask { delta: vec![false; 3] };
    assert!(ensemble_forward(&image, &e, &store, &empty, &augs, AvgMode::Logit).is_err());
}

#[test]
fn identical_members_are_mask_invariant() {
    // Four members sharing one set of weights.
    let (mut e, store) = build(1, 3);
    let spec = e.members[0].spec.clone();
    e.config.members = vec![spec; 4];
    e.members = vec![e.members[0].clone(); 4];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = common::random_tensor(&[3, 8, 8], 0.0, 1.0, &mut rng);
    let augs = vec![AugmentParams::identity(); 4];
    let single = member_logits(&e, &store, 0, &image);
    for bits in 1u64..16 {
        let mask = DropoutMask { delta: (0..4).map(|i| bits >> i & 1 == 1).collect() };
        for mode in [AvgMode::Logit, AvgMode::Probability] {
            let p = ensemble_forward(&image, &e, &store, &mask, &augs, mode).unwrap();
            for n in 0..4 {
                assert!((p[n] - sigmoid(single[n])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_member_collapse() {
    let (e, store) = build(3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let image = common::random_tensor(&[3, 9, 9], 0.0, 1.0, &mut rng);
    let augs = vec![AugmentParams::identity(); 3];
    for j in 0..3 {
        let l = member_logits(&e, &store, j, &image);
        for mode in [AvgMode::Logit, AvgMode::Probability] {
            let p = ensemble_forward(&image, &e, &store, &DropoutMask::one_hot(3, j), &augs, mode).unwrap();
            for n in 0..4 {
                assert!((p[n] - sigmoid(l[n])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn closed_form_aggregations() {
    assert!((aggregate(&[2.0, 0.0], AvgMode::Logit) - 0.731_058_578_630_004_9).abs() < 1e-9);
    assert!((aggregate(&[2.0, 0.0], AvgMode::Probability) - 0.690_398_538_988_941_1).abs() < 1e-9);
}

proptest! {
    #[test]
    fn opposite_logits_average_to_one_half(a in -20.0f64..20.0) {
        prop_assert_eq!(aggregate(&[a, -a], AvgMode::Logit), 0.5);
    }
}

#[test]
fn quarter_turn_of_a_two_by_two_pattern() {
    // Source of output (i, j) under a 90 degree turn about the center is
    // (1 - j, i).
    let img = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let turn = AugmentParams { rotation_deg: 90.0, ..AugmentParams::identity() };
    let out = apply_transform(&img, &turn);
    let expected = [3.0, 1.0, 4.0, 2.0];
    for (o, e) in out.data().iter().zip(expected) {
        assert!((o - e).abs() < 1e-12, "{:?}", out.data());
    }
}

#[test]
fn dropout_masks_are_uniform_over_fifteen_subsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 16];
    let draws = 15_000;
    for _ in 0..draws {
        counts[draw_dropout_mask(4, &mut rng).bits() as usize] += 1;
    }
    assert_eq!(counts[0], 0);
    let expected = draws as f64 / 15.0;
    let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(14.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi-square {chi2}, p {p}");
    for &c in &counts[1..] {
        assert!((c as f64 - expected).abs() < 0.2 * expected);
    }
    assert!((0..100).all(|_| draw_dropout_mask(1, &mut rng).delta == vec![true]));
}

#[test]
fn any_image_size_gives_four_logits() {
    let (e, store) = build(2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (h, w) in [(5, 7), (64, 64), (31, 17)] {
        let image = common::random_tensor(&[3, h, w], 0.0, 1.0, &mut rng);
        for k in 0..2 {
            assert_eq!(member_logits(&e, &store, k, &image).len(), 4);
        }
    }
}

#[test]
fn wider_backbones_have_more_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    Ensemble::new(common::tiny_ensemble(1), 3, &mut store, "narrow", &mut rng).unwrap();
    let narrow = store.count_with_prefix("narrow");
    let mut wide = common::tiny_ensemble(1);
    wide.members[0].width = 6;
    Ensemble::new(wide, 3, &mut store, "wide", &mut rng).unwrap();
    assert!(store.count_with_prefix("wide") > narrow);
}
