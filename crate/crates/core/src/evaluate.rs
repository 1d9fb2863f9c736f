//! ROC analysis and paired comparisons: per-cutoff AUC, pooled
//! micro-averaged ROC, the DeLong test for correlated AUCs and the
//! Wilcoxon signed-rank test.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample for which the Wilcoxon null distribution is enumerated.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Decreasing; the first is `+inf` so the curve starts at (0, 0).
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|l| **l).count();
    (pos, labels.len() - pos)
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Validation(format!(
            "ROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// 1-based ranks with ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocResult> {
    let (pos, neg) = check_binary(scores, labels)?;
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    let auc = u / (pos * neg) as f64;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
    }
    Ok(RocResult {
        thresholds,
        fpr,
        tpr,
        auc,
    })
}

/// Trapezoidal area under a curve.
pub fn trapezoid(fpr: &[f64], tpr: &[f64]) -> f64 {
    fpr.windows(2)
        .zip(tpr.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[1] + y[0]) / 2.0)
        .sum()
}

/// Pools every (score, label) pair of the cutoffs into one binary problem.
/// Single-class cutoffs are skipped with a warning.
pub fn micro_average_roc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} score lists for {} label lists",
            scores.len(),
            labels.len()
        )));
    }
    let mut pooled_s = Vec::new();
    let mut pooled_l = Vec::new();
    for (n, (s, l)) in scores.iter().zip(labels).enumerate() {
        if s.len() != l.len() {
            return Err(Error::Validation(format!(
                "cutoff {n}: {} scores for {} labels",
                s.len(),
                l.len()
            )));
        }
        let (pos, neg) = class_counts(l);
        if pos == 0 || neg == 0 {
            warn!("cutoff {n} has a single class and is left out of the pooled ROC");
            continue;
        }
        pooled_s.extend_from_slice(s);
        pooled_l.extend_from_slice(l);
    }
    if pooled_s.is_empty() {
        return Err(Error::Validation("no cutoff with both classes to pool".into()));
    }
    roc_auc(&pooled_s, &pooled_l)
}

/// Placement values: `v10[i]` for each positive, `v01[j]` for each
/// negative, in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct Placements {
    pub v10: Vec<f64>,
    pub v01: Vec<f64>,
}

pub fn placement_values(scores: &[f64], labels: &[bool]) -> Result<Placements> {
    let (m, n) = check_binary(scores, labels)?;
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    let all = midranks(scores);
    let rz_pos: Vec<f64> = all.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| *r).collect();
    let rz_neg: Vec<f64> = all.iter().zip(labels).filter(|(_, l)| !**l).map(|(r, _)| *r).collect();
    let rx = midranks(&pos);
    let ry = midranks(&neg);
    Ok(Placements {
        v10: rz_pos.iter().zip(&rx).map(|(z, x)| (z - x) / n as f64).collect(),
        v01: rz_neg.iter().zip(&ry).map(|(z, y)| 1.0 - (z - y) / m as f64).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov_ab: f64,
    /// Variance of `auc_a - auc_b`.
    pub var_diff: f64,
    pub z: f64,
    /// Two-sided.
    pub p: f64,
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len() as f64;
    if a.len() < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / k;
    let mb = b.iter().sum::<f64>() / k;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1.0)
}

pub fn normal_two_sided_p(z: f64) -> f64 {
    let phi = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - phi.cdf(z.abs()))).clamp(0.0, 1.0)
}

/// DeLong test of two correlated AUCs on the same samples.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DelongResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Validation(format!(
            "paired score lists differ in length: {} and {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let pa = placement_values(scores_a, labels)?;
    let pb = placement_values(scores_b, labels)?;
    let (m, n) = (pa.v10.len() as f64, pa.v01.len() as f64);
    let auc_a = pa.v10.iter().sum::<f64>() / m;
    let auc_b = pb.v10.iter().sum::<f64>() / m;
    let var_a = sample_cov(&pa.v10, &pa.v10) / m + sample_cov(&pa.v01, &pa.v01) / n;
    let var_b = sample_cov(&pb.v10, &pb.v10) / m + sample_cov(&pb.v01, &pb.v01) / n;
    let cov_ab = sample_cov(&pa.v10, &pb.v10) / m + sample_cov(&pa.v01, &pb.v01) / n;
    let var_diff = (var_a + var_b - 2.0 * cov_ab).max(0.0);
    let diff = auc_a - auc_b;
    let (z, p) = if var_diff > 0.0 {
        let z = diff / var_diff.sqrt();
        (z, normal_two_sided_p(z))
    } else if diff == 0.0 {
        (0.0, 1.0)
    } else {
        (diff.signum() * f64::INFINITY, 0.0)
    };
    Ok(DelongResult {
        auc_a,
        auc_b,
        var_a,
        var_b,
        cov_ab,
        var_diff,
        z,
        p,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences.
    pub n: usize,
    /// Rank sum of positive differences `a - b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub w: f64,
    pub p: f64,
    pub method: WilcoxonMethod,
}

fn signed_ranks(pairs: &[(f64, f64)]) -> (Vec<f64>, Vec<bool>) {
    let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    (midranks(&abs), d.iter().map(|v| *v > 0.0).collect())
}

fn rank_sums(ranks: &[f64], positive: &[bool]) -> (f64, f64) {
    let plus = ranks.iter().zip(positive).filter(|(_, p)| **p).fold(0.0, |acc, (r, _)| acc + r);
    let total: f64 = ranks.iter().sum();
    (plus, total - plus)
}

/// Two-sided p by counting all `2^n` sign assignments of the observed
/// (possibly tied) ranks.
pub fn wilcoxon_exact_p(ranks: &[f64], w: f64) -> f64 {
    // Average ranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let target = (2.0 * w).round() as usize;
    let below: f64 = counts[..=target.min(max)].iter().sum();
    let total = 2f64.powi(ranks.len() as i32);
    (2.0 * below / total).min(1.0)
}

/// Normal approximation with tie and continuity correction.
pub fn wilcoxon_normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
    normal_two_sided_p(dev / var.sqrt())
}

/// Zero differences are dropped; exact for up to
/// [`WILCOXON_EXACT_MAX`] remaining pairs, normal approximation above.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    if pairs.iter().any(|(a, b)| a.is_nan() || b.is_nan()) {
        return Err(Error::Validation("NaN in paired values".into()));
    }
    let (ranks, positive) = signed_ranks(pairs);
    let n = ranks.len();
    if n == 0 {
        warn!("all paired differences are zero; reporting p = 1");
        return Ok(WilcoxonResult {
            n,
            w_plus: 0.0,
            w_minus: 0.0,
            w: 0.0,
            p: 1.0,
            method: WilcoxonMethod::Exact,
        });
    }
    let (w_plus, w_minus) = rank_sums(&ranks, &positive);
    let w = w_plus.min(w_minus);
    let (p, method) = if n <= WILCOXON_EXACT_MAX {
        (wilcoxon_exact_p(&ranks, w), WilcoxonMethod::Exact)
    } else {
        (wilcoxon_normal_p(&ranks, w_plus), WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        w,
        p,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.2, 0.8], &[false, true]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.2, 0.8], &[true, false]).unwrap().auc, 0.0);
        let r = roc_auc(&[0.4, 0.3, 0.2, 0.8], &[false, true, false, true]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert!((trapezoid(&r.fpr, &r.tpr) - r.auc).abs() < 1e-12);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn tied_scores_get_half_credit() {
        let r = roc_auc(&[0.5, 0.5], &[false, true]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.fpr, vec![0.0, 1.0]);
    }

    #[test]
    fn wilcoxon_six_positive_differences() {
        let pairs: Vec<(f64, f64)> = (1..=6).map(|i| (i as f64 * 1.5, 0.0)).collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        assert_eq!(r.w, 0.0);
        assert_eq!(r.p, 0.03125);
    }

    #[test]
    fn wilcoxon_all_zero_differences() {
        let r = wilcoxon_signed_rank(&[(0.3, 0.3), (0.5, 0.5)]).unwrap();
        assert_eq!((r.n, r.p), (0, 1.0));
    }

    #[test]
    fn delong_identical_models() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.6];
        let l = [false, false, true, true, false];
        let r = delong_test(&s, &s, &l).unwrap();
        assert_eq!((r.z, r.p), (0.0, 1.0));
        assert!((r.auc_a - roc_auc(&s, &l).unwrap().auc).abs() < 1e-12);
    }
}
