use discover_core::evaluate::{
    delong_test, micro_average_roc, placement_values, roc_auc, trapezoid, wilcoxon_exact_p, wilcoxon_normal_p,
    wilcoxon_signed_rank, WilcoxonMethod,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                total += psi(scores[i], scores[j]);
                pairs += 1.0;
            }
        }
    }
    total / pairs
}

/// Scores on a coarse grid so ties are frequent.
fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = rng.gen_range(2..=max_n);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        if labels.iter().any(|l| *l) && labels.iter().any(|l| !*l) {
            return (scores, labels);
        }
    }
}

#[test]
fn auc_matches_pair_counting_on_1000_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let (s, l) = random_instance(&mut rng, 12);
        let r = roc_auc(&s, &l).unwrap();
        assert!((r.auc - brute_auc(&s, &l)).abs() < 1e-12);
        assert!((trapezoid(&r.fpr, &r.tpr) - r.auc).abs() < 1e-12);
        assert!(r.fpr.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.tpr.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!((r.fpr[0], r.tpr[0]), (0.0, 0.0));
        assert_eq!((*r.fpr.last().unwrap(), *r.tpr.last().unwrap()), (1.0, 1.0));
    }
}

#[test]
fn placement_values_match_psi_matrix_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let (s, l) = random_instance(&mut rng, 12);
        let pos: Vec<f64> = s.iter().zip(&l).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = s.iter().zip(&l).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
        let p = placement_values(&s, &l).unwrap();
        for (i, &x) in pos.iter().enumerate() {
            let v: f64 = neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64;
            assert!((p.v10[i] - v).abs() < 1e-12);
        }
        for (j, &y) in neg.iter().enumerate() {
            let v: f64 = pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64;
            assert!((p.v01[j] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn delong_matches_independent_reference() {
    let a = [0.9, 0.8, 0.75, 0.6, 0.55, 0.5, 0.4, 0.3, 0.7, 0.2];
    let b = [0.6, 0.85, 0.8, 0.65, 0.3, 0.5, 0.45, 0.35, 0.4, 0.1];
    let l = [true, true, false, true, false, true, false, false, true, false];
    let r = delong_test(&a, &b, &l).unwrap();
    assert!((r.auc_a - 0.84).abs() < 1e-12);
    assert!((r.auc_b - 0.8).abs() < 1e-12);
    assert!((r.var_diff - 0.0112).abs() < 1e-12);
    assert!((r.z - 0.377_964_473_009_227_53).abs() < 1e-9);
    assert!((r.p - 0.705_456_986_111_273_2).abs() < 1e-9);
    assert!((r.auc_a - roc_auc(&a, &l).unwrap().auc).abs() < 1e-12);
    assert!(delong_test(&a, &b[..9], &l).is_err());
    assert!(delong_test(&a, &b, &[true; 10]).is_err());
}

#[test]
fn wilcoxon_exact_matches_reference_values() {
    let d = [3, -1, 7, 12, -5, 9, 15, 2, 11, -4, 6, 13, 8, 16, 10, 14];
    let pairs: Vec<(f64, f64)> = d.iter().map(|&v| (v as f64, 0.0)).collect();
    let r = wilcoxon_signed_rank(&pairs).unwrap();
    assert_eq!(r.method, WilcoxonMethod::Exact);
    assert_eq!(r.w, 10.0);
    assert!((r.p - 0.001_312_255_859_375).abs() < 1e-15);

    let six: Vec<(f64, f64)> = (1..=6).map(|i| (i as f64 * 0.7, 0.0)).collect();
    let r = wilcoxon_signed_rank(&six).unwrap();
    assert_eq!((r.w, r.p), (0.0, 0.031_25));

    // Tied magnitudes, enumerated over all 2^8 sign patterns.
    let tied = [1.0, 1.0, 2.0, 3.0, -3.0, 4.0, 5.0, -2.0];
    let pairs: Vec<(f64, f64)> = tied.iter().map(|&v| (v, 0.0)).collect();
    let r = wilcoxon_signed_rank(&pairs).unwrap();
    assert_eq!(r.w, 9.0);
    assert!((r.p - 0.242_187_5).abs() < 1e-15);
}

#[test]
fn wilcoxon_switches_to_normal_above_twenty() {
    let pairs: Vec<(f64, f64)> = (1..=25).map(|i| (i as f64, if i % 3 == 0 { 2.0 * i as f64 } else { 0.0 })).collect();
    let r = wilcoxon_signed_rank(&pairs).unwrap();
    assert_eq!((r.n, r.method), (25, WilcoxonMethod::Normal));
    assert!(r.p > 0.0 && r.p < 1.0);
}

#[test]
fn wilcoxon_normal_tracks_exact_at_twenty() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let mut mags: Vec<f64> = (1..=20).map(f64::from).collect();
        for m in mags.iter_mut() {
            *m += rng.gen_range(0.0..0.5);
        }
        let shift: f64 = rng.gen_range(-0.6..0.6);
        let pairs: Vec<(f64, f64)> = mags
            .iter()
            .map(|&m| {
                let sign = if rng.gen_bool((0.5 + shift).clamp(0.05, 0.95)) { 1.0 } else { -1.0 };
                (sign * m, 0.0)
            })
            .collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        let ranks: Vec<f64> = (1..=20).map(f64::from).collect();
        let exact = wilcoxon_exact_p(&ranks, r.w);
        let approx = wilcoxon_normal_p(&ranks, r.w_plus);
        assert_eq!(exact, r.p);
        assert!((exact - approx).abs() < 0.02, "exact {exact} approx {approx}");
    }
}

#[test]
fn micro_average_pools_cutoffs() {
    let s = vec![0.1, 0.4, 0.35, 0.8];
    let l = vec![false, false, true, true];
    let single = micro_average_roc(&[s.clone()], &[l.clone()]).unwrap();
    assert_eq!(single, roc_auc(&s, &l).unwrap());
    let doubled = micro_average_roc(&[s.clone(), s.clone()], &[l.clone(), l.clone()]).unwrap();
    assert!((doubled.auc - single.auc).abs() < 1e-12);

    // Cutoff AUCs 1 and 0 with interleaved score ranges.
    let s1 = vec![0.1, 0.3, 0.5, 0.7];
    let l1 = vec![false, false, true, true];
    let s2 = vec![0.2, 0.4, 0.6, 0.8];
    let l2 = vec![true, true, false, false];
    assert_eq!(roc_auc(&s1, &l1).unwrap().auc, 1.0);
    assert_eq!(roc_auc(&s2, &l2).unwrap().auc, 0.0);
    let pooled = micro_average_roc(&[s1.clone(), s2.clone()], &[l1.clone(), l2.clone()]).unwrap();
    let all_s: Vec<f64> = s1.iter().chain(&s2).copied().collect();
    let all_l: Vec<bool> = l1.iter().chain(&l2).copied().collect();
    assert!((pooled.auc - brute_auc(&all_s, &all_l)).abs() < 1e-12);
    assert!((pooled.auc - 0.5).abs() < 1e-12);

    // A single-class cutoff is left out.
    let skipped = micro_average_roc(&[s.clone(), vec![0.3, 0.6]], &[l.clone(), vec![true, true]]).unwrap();
    assert_eq!(skipped.auc, single.auc);
    assert!(micro_average_roc(&[vec![0.3]], &[vec![true]]).is_err());
}

proptest! {
    #[test]
    fn auc_is_invariant_to_increasing_transforms(
        raw in prop::collection::vec((0u8..10, any::<bool>()), 2..30),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 10.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
        let base = roc_auc(&scores, &labels).unwrap().auc;
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert!((roc_auc(&warped, &labels).unwrap().auc - base).abs() < 1e-12);
    }

    #[test]
    fn delong_is_symmetric(
        raw in prop::collection::vec((0u8..8, 0u8..8, any::<bool>()), 4..25),
    ) {
        let a: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
        let b: Vec<f64> = raw.iter().map(|r| r.1 as f64).collect();
        let l: Vec<bool> = raw.iter().map(|r| r.2).collect();
        prop_assume!(l.iter().filter(|x| **x).count() >= 2 && l.iter().filter(|x| !**x).count() >= 2);
        let ab = delong_test(&a, &b, &l).unwrap();
        let ba = delong_test(&b, &a, &l).unwrap();
        prop_assert!((ab.p - ba.p).abs() < 1e-12);
        prop_assert!(ab.z == -ba.z || (ab.z - (-ba.z)).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_swap_keeps_p_and_flips_effect(
        diffs in prop::collection::vec(-20i32..20, 1..24),
    ) {
        let pairs: Vec<(f64, f64)> = diffs.iter().map(|&d| (d as f64, 0.0)).collect();
        let swapped: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (b, a)).collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        let s = wilcoxon_signed_rank(&swapped).unwrap();
        prop_assert_eq!(r.p, s.p);
        prop_assert_eq!(r.w_plus, s.w_minus);
        prop_assert!(r.p > 0.0 && r.p <= 1.0);
    }
}
