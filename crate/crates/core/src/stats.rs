//! Distribution functions and summaries: standard normal CDF, chi-squared
//! CDF and quantile, one-sample Kolmogorov-Smirnov test, type-7 quantiles.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

/// Absolute tolerance of `chi2_quantile`.
pub const QUANTILE_TOLERANCE: f64 = 1e-10;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Regularized lower incomplete gamma `P(a, x)`.
///
/// Power series for `x < a + 1`, Lentz continued fraction for `Q(a, x)`
/// otherwise.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let log_prefactor = a * x.ln() - x - libm::lgamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut denom = a;
        for _ in 0..10_000 {
            denom += 1.0;
            term *= x / denom;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefactor).exp().min(1.0)
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        let q = (log_prefactor + h.ln()).exp();
        (1.0 - q).max(0.0)
    }
}

pub fn chi2_cdf(df: u32, x: f64) -> f64 {
    regularized_gamma_p(df as f64 / 2.0, x / 2.0)
}

/// `x` with `P(chi2_df <= x) = p`, by bracketing and bisection on the CDF.
pub fn chi2_quantile(df: u32, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    if df == 0 {
        return Err(Error::InvalidDims("chi-squared needs df >= 1".into()));
    }
    let mut lo = 0.0;
    let mut hi = (df as f64).max(1.0);
    while chi2_cdf(df, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(df, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= QUANTILE_TOLERANCE * 1e-3 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Kolmogorov survival function `Q(l) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 l^2)`.
///
/// For small `l` the equivalent theta-function form
/// `1 - sqrt(2 pi)/l sum_{k>=1} exp(-(2k-1)^2 pi^2 / (8 l^2))` converges faster.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let y = -PI * PI / (8.0 * lambda * lambda);
        let mut sum = 0.0;
        for k in 1..=50 {
            let j = (2 * k - 1) as f64;
            let term = (j * j * y).exp();
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        (1.0 - (2.0 * PI).sqrt() / lambda * sum).clamp(0.0, 1.0)
    } else {
        let mut sum = 0.0;
        let mut sign = 1.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sum += sign * term;
            if term < 1e-17 {
                break;
            }
            sign = -sign;
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}

/// Kolmogorov-Smirnov statistic and p-value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// `sup_x |F_m(x) - Phi(x)|` for the empirical CDF `F_m` of `sample`.
pub fn ks_statistic(sample: &[f64]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::SampleTooSmall(0));
    }
    if sample.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    Ok(sorted.iter().enumerate().fold(0.0, |acc, (i, &x)| {
        let f = normal_cdf(x);
        let above = (i + 1) as f64 / m - f;
        let below = f - i as f64 / m;
        acc.max(above).max(below)
    }))
}

/// One-sample KS test against the standard normal, with the asymptotic
/// Kolmogorov distribution evaluated at `(sqrt(m) + 0.12 + 0.11/sqrt(m)) D`.
pub fn ks_test_normal(sample: &[f64]) -> Result<KsResult> {
    let statistic = ks_statistic(sample)?;
    Ok(KsResult {
        statistic,
        p_value: ks_p_value(statistic, sample.len()),
    })
}

pub fn ks_p_value(statistic: f64, m: usize) -> f64 {
    let rm = (m as f64).sqrt();
    kolmogorov_survival((rm + 0.12 + 0.11 / rm) * statistic)
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySelection("median of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn normal_cdf_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-15);
        assert!((normal_cdf(-1.0) - 0.15865525393145707).abs() < 1e-15);
    }

    #[test]
    fn chi2_two_df_closed_form() {
        for &p in &[0.01, 0.3, 0.5, 0.95, 0.999] {
            let q = chi2_quantile(2, p).unwrap();
            assert!((q + 2.0 * (1.0 - p).ln()).abs() < 1e-10);
        }
        assert!((chi2_quantile(2, 0.95).unwrap() - 5.991464547107979).abs() < 1e-10);
    }

    /// Simpson's rule on the chi-squared density; the substitution
    /// `x = t^2` removes the singularity at zero for one degree of freedom.
    fn chi2_cdf_by_quadrature(df: u32, x: f64) -> f64 {
        let k = df as f64 / 2.0;
        let norm = (2f64).powf(k) * libm::tgamma(k);
        // Integrate 2 t f(t^2) dt over [0, sqrt(x)].
        let f = |t: f64| {
            if t == 0.0 {
                return if df == 1 { 2.0 / norm } else { 0.0 };
            }
            let y = t * t;
            2.0 * t * y.powf(k - 1.0) * (-y / 2.0).exp() / norm
        };
        let upper = x.sqrt();
        let steps = 20_000;
        let h = upper / steps as f64;
        let mut sum = f(0.0) + f(upper);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            sum += w * f(i as f64 * h);
        }
        sum * h / 3.0
    }

    #[test]
    fn chi2_quantiles_match_quadrature_oracle() {
        let q10 = chi2_quantile(10, 0.95).unwrap();
        assert!((q10 - 18.307038053275146).abs() < 1e-8);
        assert!((chi2_cdf_by_quadrature(10, q10) - 0.95).abs() < 1e-10);
        let q1 = chi2_quantile(1, 0.5).unwrap();
        assert!((q1 - 0.454936423119572).abs() < 1e-8);
        assert!((chi2_cdf_by_quadrature(1, q1) - 0.5).abs() < 1e-10);
        // Normal-quantile identity for one degree of freedom.
        let z = 0.6744897501960817;
        assert!((q1 - z * z).abs() < 1e-8);
    }

    #[test]
    fn chi2_quantile_is_monotone() {
        let ps = [0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99];
        for df in 1..15 {
            let qs: Vec<f64> = ps.iter().map(|&p| chi2_quantile(df, p).unwrap()).collect();
            assert!(qs.windows(2).all(|w| w[0] < w[1]));
            for (i, &p) in ps.iter().enumerate() {
                assert!(chi2_quantile(df + 1, p).unwrap() > qs[i]);
            }
        }
    }

    #[test]
    fn chi2_quantile_rejects_bad_probabilities() {
        assert_eq!(chi2_quantile(3, 0.0), Err(Error::InvalidProbability(0.0)));
        assert_eq!(chi2_quantile(3, 1.0), Err(Error::InvalidProbability(1.0)));
        assert!(chi2_quantile(3, f64::NAN).is_err());
    }

    #[test]
    fn incomplete_gamma_branches_agree_at_switch() {
        for &a in &[0.5, 1.0, 2.5, 5.0, 20.0] {
            let x = a + 1.0;
            let left = regularized_gamma_p(a, x * (1.0 - 1e-12));
            let right = regularized_gamma_p(a, x);
            assert!((left - right).abs() < 1e-11);
        }
        // P(1, x) = 1 - exp(-x).
        for &x in &[0.1, 1.0, 3.0, 10.0] {
            assert!((regularized_gamma_p(1.0, x) - (1.0 - (-x).exp())).abs() < 1e-14);
        }
    }

    #[test]
    fn ks_single_point() {
        let r = ks_test_normal(&[0.5]).unwrap();
        assert!((r.statistic - 0.6914624612740131).abs() < 1e-12);
        assert_eq!(ks_test_normal(&[]), Err(Error::SampleTooSmall(0)));
    }

    #[test]
    fn kolmogorov_forms_agree() {
        for &l in &[0.9, 1.0, 1.1, 1.18, 1.25, 1.4] {
            let y = -PI * PI / (8.0 * l * l);
            let theta: f64 = 1.0
                - (2.0 * PI).sqrt() / l
                    * (1..50)
                        .map(|k| (((2 * k - 1) * (2 * k - 1)) as f64 * y).exp())
                        .sum::<f64>();
            let alt: f64 = 2.0
                * (1..100)
                    .map(|k| {
                        let s = if k % 2 == 1 { 1.0 } else { -1.0 };
                        s * (-2.0 * (k * k) as f64 * l * l).exp()
                    })
                    .sum::<f64>();
            assert!((theta - alt).abs() < 1e-12, "{l}: {theta} vs {alt}");
            assert!((kolmogorov_survival(l) - alt).abs() < 1e-12);
        }
        assert_eq!(kolmogorov_survival(0.0), 1.0);
        assert!(kolmogorov_survival(0.1) > 0.999_999);
        assert!((kolmogorov_survival(1.3580986393225505) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn ks_p_value_decreases_with_statistic() {
        for m in [1usize, 3, 10, 100] {
            let ps: Vec<f64> = (0..=100).map(|k| ks_p_value(k as f64 / 100.0, m)).collect();
            assert!(ps.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn ks_rejection_rate_under_null() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let reps = 1000;
        let m = 10_000;
        let mut rejections = 0;
        let mut sample = vec![0.0; m];
        for _ in 0..reps {
            for x in sample.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            if ks_test_normal(&sample).unwrap().p_value < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        assert!((0.03..=0.07).contains(&rate), "rejection rate {rate}");
    }

    #[test]
    fn type7_quantiles() {
        let data: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile_sorted(&data, 0.5) - 50.5).abs() < 1e-12);
        assert!((quantile_sorted(&data, 0.25) - 25.75).abs() < 1e-12);
        assert!((quantile_sorted(&data, 0.75) - 75.25).abs() < 1e-12);
        assert_eq!(quantile_sorted(&[3.0], 0.3), 3.0);
        assert!(median(&[]).is_err());
    }
}
