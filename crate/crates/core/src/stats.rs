//! Statistical tests: Wilcoxon signed-rank (exact and approximate), paired
//! t-test, and percentile bootstrap confidence intervals.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy)]
pub struct WilcoxonResult {
    /// Sum of positive-sign ranks (W+).
    pub statistic: f64,
    pub p_two_sided: f64,
    /// Residuals remaining after dropping zeros.
    pub n_used: usize,
    pub exact: bool,
}

/// Threshold below which the exact sign-assignment distribution is used.
const EXACT_MAX_N: usize = 25;

/// Paired Wilcoxon signed-rank test on residuals.
///
/// Zeros are dropped, ties get average ranks. For n <= 25 the p-value comes
/// from the exact distribution over all 2^n sign assignments of the observed
/// ranks; beyond that, a normal approximation with tie correction and
/// continuity correction.
pub fn wilcoxon_signed_rank(residuals: &[f64]) -> Result<WilcoxonResult> {
    let nonzero: Vec<f64> = residuals.iter().copied().filter(|&r| r != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::AllZeroResiduals);
    }
    if nonzero.len() < 5 {
        return Err(Error::TooFewResiduals { need: 5, got: nonzero.len() });
    }
    let n = nonzero.len();
    let ranks = average_ranks(&nonzero);
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(r, _)| **r > 0.0)
        .map(|(_, rank)| *rank)
        .sum();

    if n <= EXACT_MAX_N {
        let p = exact_two_sided_p(&ranks, w_plus);
        Ok(WilcoxonResult { statistic: w_plus, p_two_sided: p, n_used: n, exact: true })
    } else {
        let mu = n as f64 * (n as f64 + 1.0) / 4.0;
        let tie_term: f64 = tie_counts(&nonzero)
            .into_iter()
            .map(|t| {
                let t = t as f64;
                (t * t * t - t) / 48.0
            })
            .sum();
        let var = n as f64 * (n as f64 + 1.0) * (2.0 * n as f64 + 1.0) / 24.0 - tie_term;
        let diff = w_plus - mu;
        let p = if diff == 0.0 || var <= 0.0 {
            1.0
        } else {
            let z = (diff - 0.5 * diff.signum()) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0)
        };
        Ok(WilcoxonResult { statistic: w_plus, p_two_sided: p, n_used: n, exact: false })
    }
}

/// Ranks of |values| (1-based), average rank over ties.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a].abs().partial_cmp(&values[b].abs()).expect("finite residuals")
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]].abs() == values[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn tie_counts(values: &[f64]) -> Vec<usize> {
    let mut sorted: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut counts = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        if j > i {
            counts.push(j - i + 1);
        }
        i = j + 1;
    }
    counts
}

/// Exact two-sided p over all sign assignments, via the rank-sum count
/// polynomial. Ranks are doubled so half-integer average ranks stay integral;
/// counts stay exact in f64 (at most 2^25 assignments).
fn exact_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0_f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    let assignments = 2.0_f64.powi(ranks.len() as i32);
    let w2 = (w_plus * 2.0).round() as usize;
    let p_le: f64 = counts[..=w2].iter().sum::<f64>() / assignments;
    let p_ge: f64 = counts[w2..].iter().sum::<f64>() / assignments;
    (2.0 * p_le.min(p_ge)).min(1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct TTestResult {
    pub t: f64,
    pub p_two_sided: f64,
    pub df: f64,
}

/// Paired t-test on equal-length samples.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "paired_t_test",
            axis: 0,
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::EmptyData("need at least two pairs"));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid dof");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0);
    Ok(TTestResult { t, p_two_sided: p, df: n - 1.0 })
}

/// Percentile bootstrap CI for the mean, with seeded resampling.
pub fn bootstrap_ci(diffs: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if diffs.is_empty() {
        return Err(Error::EmptyData("bootstrap input"));
    }
    let n = diffs.len();
    let mut rng = Rng::derive(seed, "bootstrap");
    let mut means = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += diffs[rng.below(n)];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile(&means, alpha), percentile(&means, 1.0 - alpha)))
}

/// Linear-interpolated percentile of a sorted sample, q in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilcoxon_all_negative_n5_exact() {
        let r = wilcoxon_signed_rank(&[-1.0, -2.0, -3.0, -4.0, -5.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_two_sided - 0.0625).abs() < 1e-15, "p = {}", r.p_two_sided);
        assert!(r.exact);
    }

    #[test]
    fn wilcoxon_symmetric_residuals_center_p() {
        let r = wilcoxon_signed_rank(&[-1.0, 1.0, -2.0, 2.0, -3.0, 3.0]).unwrap();
        assert_eq!(r.statistic, 10.5);
        assert_eq!(r.p_two_sided, 1.0);
    }

    #[test]
    fn wilcoxon_mixed_signs_matches_enumeration_oracle() {
        // frozen from the independent 2^n enumeration: W+ = 22, p = 0.21875
        let r = wilcoxon_signed_rank(&[1.0, -2.0, 3.0, -4.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!(r.statistic, 22.0);
        assert!((r.p_two_sided - 0.21875).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_ties_use_average_ranks() {
        // frozen from the enumeration oracle: W+ = 13, p = 0.25
        let r = wilcoxon_signed_rank(&[1.0, 1.0, -1.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.statistic, 13.0);
        assert!((r.p_two_sided - 0.25).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_zero_handling_and_errors() {
        assert!(matches!(
            wilcoxon_signed_rank(&[0.0, 0.0]),
            Err(Error::AllZeroResiduals)
        ));
        assert!(matches!(
            wilcoxon_signed_rank(&[0.0, 1.0, -1.0, 2.0]),
            Err(Error::TooFewResiduals { need: 5, got: 3 })
        ));
        // zeros dropped: same as the 5-residual all-negative case
        let r = wilcoxon_signed_rank(&[0.0, -1.0, -2.0, -3.0, -4.0, -5.0]).unwrap();
        assert_eq!(r.n_used, 5);
        assert!((r.p_two_sided - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_one_sided_n109_is_significant_under_approximation() {
        // all residuals the same sign at n = 109: direction fixture
        let residuals: Vec<f64> = (1..=109).map(|i| -(i as f64) / 10.0).collect();
        let r = wilcoxon_signed_rank(&residuals).unwrap();
        assert!(!r.exact);
        assert!(r.p_two_sided < 0.001, "p = {}", r.p_two_sided);
    }

    #[test]
    fn t_test_matches_high_precision_reference() {
        // references computed with an arbitrary-precision incomplete-beta
        // evaluation (40 digits), frozen here
        let r = paired_t_test(&[0.523, 0.598, 0.680], &[0.79, 0.78, 0.80]).unwrap();
        assert!((r.t - (-4.451429811880233)).abs() < 1e-12);
        assert!((r.p_two_sided - 0.046941282571266285).abs() < 1e-10);

        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[1.1, 2.3, 2.6, 4.4]).unwrap();
        assert!((r.t - (-0.5619514869490168)).abs() < 1e-12);
        assert!((r.p_two_sided - 0.6133990129378546).abs() < 1e-10);

        let r = paired_t_test(&[2.1, 2.5, 3.0], &[1.9, 2.2, 2.4]).unwrap();
        assert!((r.t - 3.05085107923876).abs() < 1e-12);
        assert!((r.p_two_sided - 0.09273529127344522).abs() < 1e-10);
    }

    #[test]
    fn t_test_sign_and_zero_variance() {
        let r = paired_t_test(&[2.0, 3.0, 4.0], &[1.0, 1.5, 2.0]).unwrap();
        assert!(r.t > 0.0);
        let r = paired_t_test(&[1.0, 1.5, 2.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!(r.t < 0.0);
        assert!(matches!(
            paired_t_test(&[1.0, 2.0], &[0.5, 1.5]),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn bootstrap_constant_input_collapses() {
        let (lo, hi) = bootstrap_ci(&[0.3; 6], 500, 0.95, 42).unwrap();
        assert_eq!((lo, hi), (0.3, 0.3));
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let d = [0.1, -0.2, 0.4, 0.7, -0.3];
        let a = bootstrap_ci(&d, 1000, 0.95, 7).unwrap();
        let b = bootstrap_ci(&d, 1000, 0.95, 7).unwrap();
        let c = bootstrap_ci(&d, 1000, 0.95, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bootstrap_ci_contains_sample_mean() {
        let mut rng = Rng::new(99);
        for trial in 0..1000 {
            let n = 5 + rng.below(20);
            let data: Vec<f64> = (0..n).map(|_| rng.gaussian() * 2.0 + 0.5).collect();
            let mean = data.iter().sum::<f64>() / n as f64;
            let (lo, hi) = bootstrap_ci(&data, 300, 0.95, trial as u64).unwrap();
            assert!(lo <= mean && mean <= hi, "trial {trial}: {lo} {mean} {hi}");
        }
    }
}
