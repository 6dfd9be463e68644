//! Shared numerical building blocks: stable log-space reductions, densities
//! parametrized by variance (matching the model's conventions), random
//! variate generation, and small conjugate-update formulas.

use rand::Rng;
use rand_distr::{Beta as BetaDist, Distribution, Gamma as GammaDist, Normal as NormalDist};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erf;
use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// log(sum_i exp(x_i)) with max subtraction. Empty or all `-inf` input gives
/// `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn log_sum_exp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// log(1 - exp(x)) for x <= 0; `-inf` at x == 0.
pub fn ln_1m_exp(x: f64) -> f64 {
    debug_assert!(x <= 0.0);
    if x == 0.0 {
        f64::NEG_INFINITY
    } else if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Given `total = log(S)` for a sum S of exponentials that contains the term
/// `exp(old)`, return `log(S - exp(old) + exp(new))`.
///
/// When removing `old` cancels nearly all of S the subtraction loses
/// precision, so `rescan` must recompute `log(S - exp(old))` exactly (a sum
/// over the remaining terms).
pub fn log_sum_replace(total: f64, old: f64, new: f64, rescan: impl FnOnce() -> f64) -> f64 {
    debug_assert!(old <= total + 1e-9);
    let gap = old - total;
    let base = if gap >= -36.0 {
        // exp(old) is within ~1e-16..1 of the whole sum; the complement
        // 1 - exp(gap) is inaccurate once the remainder is tiny relative to S.
        let complement = -gap.min(0.0).exp_m1();
        if complement < 1e-8 {
            rescan()
        } else {
            total + complement.ln()
        }
    } else {
        total + ln_1m_exp(gap)
    };
    log_sum_exp2(base, new)
}

/// Log-density of N(mean, var), variance parametrization.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    debug_assert!(var > 0.0);
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    normal_logpdf(x, mean, var).exp()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Log-density of beta(a, b) on (0, 1).
pub fn beta_logpdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return f64::NEG_INFINITY;
    }
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() + ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
}

/// Log-density of Gamma(shape, rate).
pub fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log-density of IG(shape, scale): x^-(shape+1) exp(-scale/x) scale^shape / Γ(shape).
pub fn inverse_gamma_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// CDF of beta(a, b) via the regularized incomplete beta function.
pub fn beta_cdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        beta_reg(a, b, x)
    }
}

pub fn sample_normal<R: Rng>(rng: &mut R, mean: f64, var: f64) -> f64 {
    debug_assert!(var > 0.0);
    NormalDist::new(mean, var.sqrt()).expect("valid normal").sample(rng)
}

/// Gamma(shape, rate) draw.
pub fn sample_gamma<R: Rng>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    GammaDist::new(shape, 1.0 / rate).expect("valid gamma").sample(rng)
}

/// IG(shape, scale) draw as the reciprocal of a Gamma(shape, rate = scale) draw.
pub fn sample_inverse_gamma<R: Rng>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    1.0 / sample_gamma(rng, shape, scale)
}

pub fn sample_beta<R: Rng>(rng: &mut R, a: f64, b: f64) -> f64 {
    BetaDist::new(a, b).expect("valid beta").sample(rng)
}

/// Beta(a, b) draw restricted to [lo, hi], by inverting the CDF with
/// bisection. Endpoints are clamped away from {0, 1}; when the interval
/// carries less mass than f64 can resolve the density is treated as flat
/// on it.
pub fn sample_truncated_beta<R: Rng>(rng: &mut R, a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo < hi, "empty truncation interval [{lo}, {hi}]");
    let lo = lo.max(1e-12);
    let hi = hi.min(1.0 - 1e-12);
    if lo >= hi {
        return 0.5 * (lo + hi).clamp(1e-12, 1.0 - 1e-12);
    }
    let flo = beta_cdf(lo, a, b);
    let fhi = beta_cdf(hi, a, b);
    let u: f64 = rng.random();
    let mass = fhi - flo;
    if !(mass > 1e-280 * flo.max(1e-280)) {
        return lo + u * (hi - lo);
    }
    let target = flo + u * mass;
    let (mut xlo, mut xhi) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (xlo + xhi);
        if beta_cdf(mid, a, b) < target {
            xlo = mid;
        } else {
            xhi = mid;
        }
        if xhi - xlo < 1e-15 * xhi.max(1e-300) {
            break;
        }
    }
    0.5 * (xlo + xhi)
}

/// Type-7 (linear interpolation) quantile of an ascending-sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&q));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Posterior (mean, variance) for a normal mean under a N(prior_mean,
/// prior_var) prior and `n` conditionally independent N(·, like_var)
/// observations with sum `obs_sum`.
pub fn normal_normal_posterior(
    prior_mean: f64,
    prior_var: f64,
    like_var: f64,
    n: f64,
    obs_sum: f64,
) -> (f64, f64) {
    let prec = 1.0 / prior_var + n / like_var;
    let var = 1.0 / prec;
    let mean = var * (prior_mean / prior_var + obs_sum / like_var);
    (mean, var)
}

/// Composite trapezoid integral of tabulated values over an evenly spaced or
/// uneven grid.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mut acc = 0.0;
    for i in 1..xs.len() {
        acc += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
    }
    acc
}

/// Evenly spaced grid of `n >= 2` points covering [lo, hi] inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_sum_exp_matches_naive_and_survives_shift() {
        let xs = [0.3, -1.2, 2.0, 0.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
        let shifted: Vec<f64> = xs.iter().map(|x| x - 1000.0).collect();
        assert!((log_sum_exp(&shifted) - (naive - 1000.0)).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_empty_is_neg_inf() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_sum_replace_agrees_with_recompute() {
        let xs = [0.5, -2.0, 1.5, -40.0];
        let total = log_sum_exp(&xs);
        for (i, &old) in xs.iter().enumerate() {
            for new in [-3.0, 0.7, -50.0] {
                let mut ys = xs.to_vec();
                ys[i] = new;
                let expect = log_sum_exp(&ys);
                let rest: Vec<f64> = xs
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, &v)| v)
                    .collect();
                let got = log_sum_replace(total, old, new, || log_sum_exp(&rest));
                assert!((got - expect).abs() < 1e-12, "i={i} new={new}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn log_sum_replace_handles_dominant_removal() {
        // Removing the dominant term must fall back to the rescan.
        let xs = [0.0, -60.0];
        let total = log_sum_exp(&xs);
        let got = log_sum_replace(total, 0.0, -70.0, || -60.0);
        let expect = log_sum_exp(&[-60.0, -70.0]);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn normal_logpdf_standard_ordinate() {
        assert!((normal_pdf(0.0, 0.0, 1.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        // Variance (not sd) parametrization: N(0 | 0, 4) = 1/(2*sqrt(2*pi)).
        assert!((normal_pdf(0.0, 0.0, 4.0) - 0.199_471_140_200_716_35).abs() < 1e-15);
    }

    #[test]
    fn truncated_beta_stays_in_interval_and_tracks_conditional_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b, lo, hi) = (2.5, 4.0, 0.2, 0.5);
        let n = 40_000;
        let mut draws: Vec<f64> = (0..n)
            .map(|_| sample_truncated_beta(&mut rng, a, b, lo, hi))
            .collect();
        draws.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!(draws[0] >= lo && draws[n - 1] <= hi);
        let flo = beta_cdf(lo, a, b);
        let mass = beta_cdf(hi, a, b) - flo;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let emp = (i + 1) as f64 / n as f64;
                let the = (beta_cdf(x, a, b) - flo) / mass;
                (emp - the).abs()
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.012, "ks = {ks}");
    }

    #[test]
    fn truncated_beta_tiny_interval_is_sane() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = sample_truncated_beta(&mut rng, 300.0, 2.0, 0.4, 0.4 + 1e-13);
            assert!((0.4..=0.4 + 1e-13).contains(&x));
        }
    }

    #[test]
    fn gamma_sampler_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<f64> = (0..200_000).map(|_| sample_gamma(&mut rng, 3.0, 2.0)).collect();
        assert!((mean(&draws) - 1.5).abs() < 0.01);
        assert!((variance(&draws) - 0.75).abs() < 0.02);
    }

    #[test]
    fn inverse_gamma_sampler_moments() {
        // IG(3, 4): mean 4/2 = 2, variance 16/(4*1) = 4.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let draws: Vec<f64> =
            (0..400_000).map(|_| sample_inverse_gamma(&mut rng, 3.0, 4.0)).collect();
        assert!((mean(&draws) - 2.0).abs() < 0.02);
        assert!((variance(&draws) - 4.0).abs() < 0.3);
    }

    #[test]
    fn quantile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 4.0);
        assert!((quantile_sorted(&xs, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-12);
    }
}
