mod common;

use std::collections::BTreeMap;

use discover_autograd::check::{check_input, check_params, CheckReport};
use discover_autograd::nn::Ctx;
use discover_autograd::{Graph, ParamId, ParamStore, Tensor};
use discover_core::attribution::{attribute, AttributionMethod};
use discover_core::ensemble::{warp_maps, AugmentParams, DropoutMask, Ensemble};
use discover_core::fusion_train::{step_gradients, Model, Stage};
use discover_core::projector::{volumes_to_tensor, Projector, ProjectorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn assert_report(what: &str, r: &CheckReport) {
    assert!(r.probes > 0, "{what}: nothing probed");
    assert!(r.max_abs_grad > 0.0, "{what}: all gradients zero");
    assert!(r.max_rel_err <= TOL, "{what}: relative error {}", r.max_rel_err);
}

fn all_trainable(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store.trainable_with_prefix(prefix).collect()
}

/// Weighted sum of the training-mode projector output.
fn projector_loss(p: &Projector, store: &ParamStore, x: &Tensor, w: &Tensor) -> (f64, BTreeMap<ParamId, Tensor>, Tensor) {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let mut ctx = Ctx::new(&mut g, store, true, true);
    let out = p.forward(&mut ctx, xv);
    let loss = g.weighted_sum(out, w.clone());
    let grads = g.backward(loss);
    let gx = grads.get(xv).cloned().unwrap();
    (g.value(loss).item(), grads.params(&g), gx)
}

#[test]
fn projector_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let p = Projector::new(ProjectorConfig { phi: 2, ..ProjectorConfig::default() }, &mut store, "proj", &mut rng).unwrap();
    common::jitter(&mut store, &mut rng);
    let vol = common::random_volume([4, 32, 4], &mut rng);
    let x = volumes_to_tensor(&[&vol]).unwrap();
    let w = common::random_tensor(&[1, 3, 1, 16], -1.0, 1.0, &mut rng);
    let (_, gp, gx) = projector_loss(&p, &store, &x, &w);
    let ids = all_trainable(&store, "proj");
    let r = check_params(&store, &ids, &gp, 6, H, &mut rng, |s| projector_loss(&p, s, &x, &w).0);
    assert_report("projector parameters", &r);
    let r = check_input(&x, &gx, 60, H, &mut rng, |t| projector_loss(&p, &store, t, &w).0);
    assert_report("projector input", &r);
}

struct Toy {
    projector: Projector,
    ensemble: Ensemble,
    store: ParamStore,
}

/// Projector feeding the ensemble through non-identity transforms, with a
/// fixed dropout mask, on a batch of two.
fn toy_loss(t: &Toy, store: &ParamStore, x: &Tensor, mask: &DropoutMask, aug: &[AugmentParams]) -> (f64, BTreeMap<ParamId, Tensor>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut ctx = Ctx::new(&mut g, store, true, true);
    let img = t.projector.forward_image(&mut ctx, xv, [6, 6]);
    let per: Vec<Vec<AugmentParams>> = aug.iter().map(|a| vec![*a, AugmentParams { hflip: !a.hflip, ..*a }]).collect();
    let out = t.ensemble.forward(&mut ctx, img, mask, &warp_maps(&per, 6, 6));
    let loss = g.bce(out.prob, &[1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], 1e-7);
    let grads = g.backward(loss).params(&g);
    (g.value(loss).item(), grads)
}

#[test]
fn ensemble_gradients_pass_through_transforms_and_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let projector = Projector::new(ProjectorConfig { phi: 2, ..ProjectorConfig::default() }, &mut store, "proj", &mut rng).unwrap();
    let ensemble = Ensemble::new(common::tiny_ensemble(3), 3, &mut store, "c1", &mut rng).unwrap();
    common::jitter(&mut store, &mut rng);
    let toy = Toy { projector, ensemble, store };
    let vols = [common::random_volume([6, 16, 6], &mut rng), common::random_volume([6, 16, 6], &mut rng)];
    let x = volumes_to_tensor(&[&vols[0], &vols[1]]).unwrap();
    let aug = [
        AugmentParams { rotation_deg: 7.0, translate: [0.05, -0.03], scale: 1.05, hflip: false },
        AugmentParams { rotation_deg: -4.0, translate: [0.0, 0.08], scale: 0.95, hflip: true },
        AugmentParams { rotation_deg: 2.0, translate: [0.02, 0.0], scale: 1.0, hflip: false },
    ];
    let mask = DropoutMask { delta: vec![true, false, true] };
    let (_, grads) = toy_loss(&toy, &toy.store, &x, &mask, &aug);
    let f = |s: &ParamStore| toy_loss(&toy, s, &x, &mask, &aug).0;

    let r = check_params(&toy.store, &all_trainable(&toy.store, "proj"), &grads, 5, H, &mut rng, f);
    assert_report("projector through transforms", &r);
    for k in [0, 2] {
        let ids = all_trainable(&toy.store, &format!("c1.m{k}."));
        let r = check_params(&toy.store, &ids, &grads, 4, H, &mut rng, f);
        assert_report(&format!("active member {k}"), &r);
    }
    let dropped = all_trainable(&toy.store, "c1.m1.");
    assert!(dropped.iter().all(|id| !grads.contains_key(id)));
}

#[test]
fn fused_loss_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model = Model::new(common::tiny_model_config(), 3).unwrap();
    common::jitter(&mut model.store, &mut rng);
    let samples = [
        common::sample("a", 1, common::random_volume([4, 16, 4], &mut rng)),
        common::sample("b", 3, common::random_volume([4, 16, 4], &mut rng)),
    ];
    let batch: Vec<_> = samples.iter().collect();
    let (_, grads) = step_gradients(&model, &batch, Stage::Joint, 5).unwrap();
    let loss_at = |s: &ParamStore| {
        let mut m = model.clone();
        m.store = s.clone();
        step_gradients(&m, &batch, Stage::Joint, 5).unwrap().0
    };
    for prefix in ["proj", "c1", "c2"] {
        let ids = all_trainable(&model.store, prefix);
        let r = check_params(&model.store, &ids, &grads, 2, H, &mut rng, loss_at);
        assert_report(prefix, &r);
    }
}

#[test]
fn saliency_matches_central_differences_of_the_logit() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let ensemble = Ensemble::new(common::tiny_ensemble(2), 3, &mut store, "c1", &mut rng).unwrap();
    common::jitter(&mut store, &mut rng);
    let clf = |g: &mut Graph, x| {
        let mut ctx = Ctx::new(g, &store, false, false);
        ensemble.forward(&mut ctx, x, &DropoutMask::full(2), &[None, None]).logit
    };
    let image = common::random_tensor(&[3, 8, 8], 0.0, 1.0, &mut rng);
    for n in 0..4 {
        let a = attribute(&image, &clf, AttributionMethod::Saliency, n).unwrap();
        let r = check_input(&image, &a, 40, H, &mut rng, |t| {
            let mut g = Graph::new();
            let x = g.constant(t.clone().reshape(&[1, 3, 8, 8]).unwrap());
            let out = clf(&mut g, x);
            g.value(out).data()[n]
        });
        assert_report(&format!("saliency output {n}"), &r);
    }
}

