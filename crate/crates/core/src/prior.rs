//! Default prior elicitation: map rough center/range proxies for the data to
//! a complete hyperprior configuration. The recipe keeps the slope prior
//! variance at 1 (centered on the stationary region), centers locations at
//! the data center, and matches every variance-scale prior mean to
//! (range/4)^2.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::HyperpriorConfig;

/// Center and range proxies for the observed series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataProxy {
    pub d: f64,
    pub r: f64,
}

impl DataProxy {
    pub fn new(d: f64, r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite() && d.is_finite()) {
            return Err(Error::domain("range proxy must be positive and finite"));
        }
        Ok(DataProxy { d, r })
    }

    /// Midrange and range of the series.
    pub fn from_series(data: &[f64]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::validation("series is empty"));
        }
        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::validation("series contains non-finite values"));
        }
        DataProxy::new(0.5 * (lo + hi), (hi - lo).max(1e-9))
    }
}

/// Fixed shape parameters; small values above 1 keep every inverse-gamma
/// prior mean finite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedShapes {
    pub a_v: f64,
    pub nu: f64,
    pub a_s: f64,
    pub a_c: f64,
}

impl Default for FixedShapes {
    fn default() -> Self {
        FixedShapes { a_v: 2.0, nu: 2.0, a_s: 2.0, a_c: 2.0 }
    }
}

pub const DEFAULT_ALPHA_PRIOR: (f64, f64) = (0.5, 0.5);
pub const DEFAULT_TRUNCATION: usize = 30;

/// Build the full hyperprior configuration from the data proxies.
///
/// Identities enforced exactly:
///   Var(beta)   = b_theta + b_c/(a_c - 1)      = 1   (equal split)
///   Var(mu_y)   = b_m_y  + b_v_y/(a_v_y - 1)   = (r/4)^2 (equal split)
///   Var(mu_x)   = b_m_x  + b_v_x/(a_v_x - 1)   = (r/4)^2 (equal split)
///   E(delta_y)  = a_s_y / (b_s_y (nu_y - 1))   = (r/4)^2
///   E(delta_x)  = a_s_x / (b_s_x (nu_x - 1))   = (r/4)^2
/// with E(beta) = a_theta = 0 and E(mu_x) = E(mu_y) = d.
pub fn default_priors(proxy: DataProxy, shapes: Option<FixedShapes>) -> Result<HyperpriorConfig> {
    let sh = shapes.unwrap_or_default();
    for (name, v) in [("a_v", sh.a_v), ("nu", sh.nu), ("a_s", sh.a_s), ("a_c", sh.a_c)] {
        if !(v > 1.0 && v.is_finite()) {
            return Err(Error::domain(format!(
                "shape {name} must exceed 1 for a finite prior mean (got {v})"
            )));
        }
    }
    let r2 = (proxy.r / 4.0) * (proxy.r / 4.0);
    let cfg = HyperpriorConfig {
        a_m_x: proxy.d,
        b_m_x: r2 / 2.0,
        a_m_y: proxy.d,
        b_m_y: r2 / 2.0,
        a_v_x: sh.a_v,
        b_v_x: (r2 / 2.0) * (sh.a_v - 1.0),
        a_v_y: sh.a_v,
        b_v_y: (r2 / 2.0) * (sh.a_v - 1.0),
        a_s_x: sh.a_s,
        b_s_x: sh.a_s / (r2 * (sh.nu - 1.0)),
        a_s_y: sh.a_s,
        b_s_y: sh.a_s / (r2 * (sh.nu - 1.0)),
        a_theta: 0.0,
        b_theta: 0.5,
        a_c: sh.a_c,
        b_c: 0.5 * (sh.a_c - 1.0),
        nu_x: sh.nu,
        nu_y: sh.nu,
        a_alpha: DEFAULT_ALPHA_PRIOR.0,
        b_alpha: DEFAULT_ALPHA_PRIOR.1,
        truncation: DEFAULT_TRUNCATION,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransitionModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn slope_variance_identity_is_exact() {
        let cfg = default_priors(DataProxy::new(3.0, 10.0).unwrap(), None).unwrap();
        assert_eq!(cfg.a_theta, 0.0);
        assert_eq!(cfg.b_theta + cfg.b_c / (cfg.a_c - 1.0), 1.0);
    }

    #[test]
    fn unit_range_case() {
        // d = 0, r = 4 gives (r/4)^2 = 1: E(delta_y) = 1 and Var(mu_y) = 1.
        let cfg = default_priors(DataProxy::new(0.0, 4.0).unwrap(), None).unwrap();
        assert!((cfg.a_s_y / (cfg.b_s_y * (cfg.nu_y - 1.0)) - 1.0).abs() < 1e-12);
        assert!((cfg.b_m_y + cfg.b_v_y / (cfg.a_v_y - 1.0) - 1.0).abs() < 1e-12);
        assert_eq!(cfg.a_m_y, 0.0);
    }

    #[test]
    fn waiting_time_proxy_scale() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/old_faithful_waiting.txt");
        let data = crate::io::read_series(path.as_ref(), None).unwrap();
        let proxy = DataProxy::from_series(&data).unwrap();
        assert_eq!(proxy.r, 53.0);
        assert_eq!(proxy.d, 69.5);
        let cfg = default_priors(proxy, None).unwrap();
        let e_delta_x = cfg.a_s_x / (cfg.b_s_x * (cfg.nu_x - 1.0));
        assert!((e_delta_x - 175.5625).abs() < 1e-9);
    }

    #[test]
    fn rejects_shapes_at_or_below_one() {
        let proxy = DataProxy::new(0.0, 4.0).unwrap();
        let bad = FixedShapes { a_c: 1.0, ..FixedShapes::default() };
        assert!(default_priors(proxy, Some(bad)).is_err());
        let bad = FixedShapes { nu: 0.5, ..FixedShapes::default() };
        assert!(default_priors(proxy, Some(bad)).is_err());
    }

    #[test]
    fn scale_equivariance() {
        let base = default_priors(DataProxy::new(1.0, 6.0).unwrap(), None).unwrap();
        let (a, b) = (2.5, -4.0);
        let moved =
            default_priors(DataProxy::new(a * 1.0 + b, a * 6.0).unwrap(), None).unwrap();
        // Locations move affinely.
        assert!((moved.a_m_x - (a * base.a_m_x + b)).abs() < 1e-12);
        assert!((moved.a_m_y - (a * base.a_m_y + b)).abs() < 1e-12);
        // Squared-scale constants pick up a^2; the gamma rates on the
        // inverse-gamma scales pick up a^-2.
        for (m, bse) in [
            (moved.b_m_x, base.b_m_x),
            (moved.b_m_y, base.b_m_y),
            (moved.b_v_x, base.b_v_x),
            (moved.b_v_y, base.b_v_y),
        ] {
            assert!((m - a * a * bse).abs() < 1e-12 * m.abs());
        }
        for (m, bse) in [(moved.b_s_x, base.b_s_x), (moved.b_s_y, base.b_s_y)] {
            assert!((m - bse / (a * a)).abs() < 1e-12 * m.abs());
        }
        // Dimensionless slope constants and shapes are untouched.
        assert_eq!(moved.b_theta, base.b_theta);
        assert_eq!(moved.b_c, base.b_c);
        assert_eq!(moved.a_v_x, base.a_v_x);
        assert_eq!(moved.nu_x, base.nu_x);
    }

    #[test]
    fn prior_predictive_expectation_centers_at_d() {
        let d = 7.0;
        let cfg = default_priors(DataProxy::new(d, 12.0).unwrap(), None).unwrap();
        let cfg = HyperpriorConfig { truncation: 10, ..cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| cfg.sample_prior_state(&mut rng).conditional_expectation(d))
            .collect();
        let mean = crate::stats::mean(&draws);
        let se = (crate::stats::variance(&draws) / n as f64).sqrt();
        assert!(
            (mean - d).abs() < 3.0 * se.max(1e-6),
            "prior predictive mean {mean} vs center {d} (se {se})"
        );
    }

    #[test]
    fn slope_prior_moments() {
        let cfg = default_priors(DataProxy::new(0.0, 4.0).unwrap(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 200_000;
        let betas: Vec<f64> = (0..n)
            .map(|_| {
                let psi = cfg.sample_prior_psi(&mut rng);
                crate::stats::sample_normal(&mut rng, psi.theta, psi.c)
            })
            .collect();
        let mean = crate::stats::mean(&betas);
        let var = crate::stats::variance(&betas);
        // The variance estimator is heavy-tailed (the slope-variance prior
        // has no second moment), so the variance check is loose.
        assert!(mean.abs() < 0.01, "prior slope mean {mean}");
        assert!((var - 1.0).abs() < 0.15, "prior slope variance {var}");
    }
}
