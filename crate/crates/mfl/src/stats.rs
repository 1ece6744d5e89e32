//! Statistical and numerical utilities shared by the experiment suite.
//!
//! Everything here is deterministic: sums reduce pairwise in index
//! order, sorts use total order on floats, and the special-function
//! wrappers delegate to `statrs`.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

/// Pairwise (tree) summation in fixed index order: deterministic and with
/// O(log n) round-off growth, independent of how the terms were produced.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

pub fn mean(v: &[f64]) -> f64 {
    pairwise_sum(v) / v.len() as f64
}

/// Unbiased sample variance (n − 1 in the denominator).
pub fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    let sq: Vec<f64> = v.iter().map(|&x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (v.len() as f64 - 1.0)
}

/// Standard error of the sample mean.
pub fn standard_error(v: &[f64]) -> f64 {
    (sample_variance(v) / v.len() as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Pearson correlation of two equal-length samples.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape("correlation: need two equal-length samples of size >= 2".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Domain("correlation: a sample is constant".into()));
    }
    Ok(num / (va * vb).sqrt())
}

/// Ordinary least-squares line `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape("linear_fit: need two equal-length samples of size >= 2".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&u, &v) in x.iter().zip(y) {
        sxx += (u - mx) * (u - mx);
        sxy += (u - mx) * (v - my);
    }
    if sxx == 0.0 {
        return Err(Error::Domain("linear_fit: x values are all equal".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Standard normal CDF Φ.
pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

/// Standard normal quantile Φ⁻¹.
pub fn std_normal_quantile(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs u in (0,1), got {u}")));
    }
    Ok(Normal::new(0.0, 1.0).unwrap().inverse_cdf(u))
}

/// Upper tail P(χ²_p > x) via the regularized upper incomplete gamma.
pub fn chi_squared_upper_tail(p: usize, x: f64) -> Result<f64> {
    if p == 0 {
        return Err(Error::Domain("chi-squared: p must be >= 1".into()));
    }
    if x < 0.0 {
        return Ok(1.0);
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    Ok(gamma_ur(p as f64 / 2.0, x / 2.0))
}

/// Kolmogorov–Smirnov sup-distance of a sample against the standard
/// normal, with the asymptotic p-value (Kolmogorov series truncated at
/// 100 terms). Requires at least 8 observations.
pub fn ks_test(sample: &[f64]) -> Result<(f64, f64)> {
    ks_test_cdf(sample, std_normal_cdf)
}

/// KS test against an arbitrary continuous CDF.
pub fn ks_test_cdf(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    let n = sample.len();
    if n < 8 {
        return Err(Error::Domain(format!("ks_test: sample size {n} too small (need >= 8)")));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("ks_test: non-finite sample value".into()));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut stat: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        stat = stat.max((i as f64 + 1.0) / nf - f).max(f - i as f64 / nf);
    }
    Ok((stat, kolmogorov_pvalue(stat, n)))
}

/// Asymptotic Kolmogorov p-value P(sup|F_n − F| > d) ≈ 2 Σ (−1)^{k−1} e^{−2k²nd²},
/// truncated at 100 terms and clamped to [0, 1].
pub fn kolmogorov_pvalue(stat: f64, n: usize) -> f64 {
    let x = (n as f64).sqrt() * stat;
    // Below this the truncated alternating series has not yet converged;
    // the true p-value is 1 to far better than double precision.
    if x < 0.02 {
        return 1.0;
    }
    let mut p = 0.0;
    let mut sign = 1.0;
    for k in 1..=100u32 {
        let kk = k as f64;
        p += sign * (-2.0 * kk * kk * x * x).exp();
        sign = -sign;
    }
    (2.0 * p).clamp(0.0, 1.0)
}

/// Exact Wasserstein-1 distance between two equal-size empirical
/// measures on R: mean absolute difference of order statistics.
pub fn wasserstein1_1d(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.len() != sample_b.len() {
        return Err(Error::Shape(format!(
            "wasserstein1_1d: length mismatch {} vs {}",
            sample_a.len(),
            sample_b.len()
        )));
    }
    if sample_a.is_empty() {
        return Err(Error::Domain("wasserstein1_1d: empty samples".into()));
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| (x - y).abs()).collect();
    Ok(mean(&diffs))
}

/// Exact Wasserstein-1 distance between two equal-weight empirical
/// measures on R of possibly different sizes: ∫ |F_a − F_b| over the
/// merged support.
pub fn wasserstein1_1d_unequal(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::Domain("wasserstein1: empty samples".into()));
    }
    if sample_a.len() == sample_b.len() {
        return wasserstein1_1d(sample_a, sample_b);
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut prev = f64::NAN;
    let mut total = 0.0;
    while ia < a.len() || ib < b.len() {
        let next = match (a.get(ia), b.get(ib)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        if prev.is_finite() && next > prev {
            let fa = ia as f64 / na;
            let fb = ib as f64 / nb;
            total += (fa - fb).abs() * (next - prev);
        }
        while ia < a.len() && a[ia] <= next {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= next {
            ib += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// 16-point Gauss–Legendre nodes and weights on [0, 1].
pub fn gauss_legendre_16_unit() -> ([f64; 16], [f64; 16]) {
    // Standard abscissas/weights on [−1, 1], mapped to [0, 1].
    const X: [f64; 8] = [
        0.095_012_509_837_637_44,
        0.281_603_550_779_258_9,
        0.458_016_777_657_227_4,
        0.617_876_244_402_643_75,
        0.755_404_408_355_003_0,
        0.865_631_202_387_831_7,
        0.944_575_023_073_232_6,
        0.989_400_934_991_649_9,
    ];
    const W: [f64; 8] = [
        0.189_450_610_455_068_5,
        0.182_603_415_044_923_6,
        0.169_156_519_395_002_54,
        0.149_595_988_816_576_73,
        0.124_628_971_255_533_87,
        0.095_158_511_682_492_78,
        0.062_253_523_938_647_89,
        0.027_152_459_411_754_095,
    ];
    let mut nodes = [0.0; 16];
    let mut weights = [0.0; 16];
    for k in 0..8 {
        nodes[k] = 0.5 * (1.0 - X[7 - k]);
        nodes[8 + k] = 0.5 * (1.0 + X[k]);
        weights[k] = 0.5 * W[7 - k];
        weights[8 + k] = 0.5 * W[k];
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pairwise_sum_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|k| (k as f64).sin()).collect();
        let naive: f64 = v.iter().sum();
        assert_relative_eq!(pairwise_sum(&v), naive, max_relative = 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (nodes, weights) = gauss_legendre_16_unit();
        let total: f64 = weights.iter().sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-13);
        // ∫₀¹ x^k dx = 1/(k+1), exact for degree ≤ 31.
        for k in [1usize, 2, 5, 10, 21, 31] {
            let quad: f64 = nodes.iter().zip(&weights).map(|(&x, &w)| w * x.powi(k as i32)).sum();
            assert_relative_eq!(quad, 1.0 / (k as f64 + 1.0), max_relative = 1e-12);
        }
    }

    #[test]
    fn wasserstein_basics() {
        assert_relative_eq!(wasserstein1_1d(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_relative_eq!(wasserstein1_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_relative_eq!(wasserstein1_1d(&[0.0, 2.0], &[3.0, 1.0]).unwrap(), 1.0);
        assert!(wasserstein1_1d(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn wasserstein_unequal_matches_equal_case() {
        let a = [0.3, -1.0, 2.0, 0.7];
        let b = [0.1, 0.4, -0.2, 1.1];
        assert_relative_eq!(
            wasserstein1_1d_unequal(&a, &b).unwrap(),
            wasserstein1_1d(&a, &b).unwrap(),
            max_relative = 1e-12
        );
        // {0} vs {0,1}: couple half the mass from 0 to 1 → 1/2.
        assert_relative_eq!(wasserstein1_1d_unequal(&[0.0], &[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn ks_quantile_sample_has_tiny_statistic() {
        let n = 1000;
        let sample: Vec<f64> = (1..=n)
            .map(|k| std_normal_quantile((k as f64 - 0.5) / n as f64).unwrap())
            .collect();
        let (stat, p) = ks_test(&sample).unwrap();
        assert!(stat <= 10.0 * 0.5 / n as f64, "stat {stat}");
        assert!(p > 0.999);
    }

    #[test]
    fn ks_constant_sample_is_rejected_strongly() {
        let sample = vec![0.0; 64];
        let (stat, p) = ks_test(&sample).unwrap();
        assert!(stat >= 0.5, "stat {stat}");
        assert!(p < 1e-6);
    }

    #[test]
    fn ks_pvalue_monotone_in_statistic() {
        let n = 200;
        let mut prev = 1.0;
        for k in 1..40 {
            let p = kolmogorov_pvalue(0.005 + k as f64 * 0.01, n);
            assert!(p <= prev + 1e-15, "p not monotone at step {k}");
            prev = p;
        }
    }

    #[test]
    fn ks_rejects_small_samples() {
        assert!(ks_test(&[0.0; 7]).is_err());
    }

    #[test]
    fn chi_squared_tail_values() {
        // P(χ²₁ > 0) = 1; P(χ²₂ > x) = e^{−x/2}.
        assert_relative_eq!(chi_squared_upper_tail(1, 0.0).unwrap(), 1.0);
        assert_relative_eq!(
            chi_squared_upper_tail(2, 3.0).unwrap(),
            (-1.5f64).exp(),
            max_relative = 1e-10
        );
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|&u| -0.5 * u + 2.0).collect();
        let (slope, intercept) = linear_fit(&x, &y).unwrap();
        assert_relative_eq!(slope, -0.5, max_relative = 1e-12);
        assert_relative_eq!(intercept, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_relative_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_relative_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
