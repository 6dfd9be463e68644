//! Reference data generators: Brownian motion paths, the skew-normal
//! transition process used in the simulation studies, and ancestral
//! simulation from any fitted transition mechanism.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TransitionModel;
use crate::stats::sample_normal;

/// Skew-normal parameters (location, scale, shape). The density is the
/// standard Azzalini form 2/omega phi((y-xi)/omega) Phi(alpha (y-xi)/omega).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkewNormalParams {
    pub xi: f64,
    pub omega: f64,
    pub alpha_skew: f64,
}

impl SkewNormalParams {
    pub fn new(xi: f64, omega: f64, alpha_skew: f64) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::domain("skew-normal scale must be positive"));
        }
        Ok(SkewNormalParams { xi, omega, alpha_skew })
    }

    /// Closed-form mean: xi + omega sqrt(2/pi) alpha / sqrt(1 + alpha^2).
    pub fn mean(&self) -> f64 {
        let delta = self.alpha_skew / (1.0 + self.alpha_skew * self.alpha_skew).sqrt();
        self.xi + self.omega * (2.0 / std::f64::consts::PI).sqrt() * delta
    }

    pub fn log_density(&self, y: f64) -> f64 {
        let z = (y - self.xi) / self.omega;
        crate::stats::normal_logpdf(z, 0.0, 1.0) - self.omega.ln()
            + 2.0f64.ln()
            + crate::stats::normal_cdf(self.alpha_skew * z).max(1e-300).ln()
    }
}

/// One skew-normal draw via the two-variable construction: with (u0, u1)
/// standard normal and correlation alpha/sqrt(1+alpha^2), sign(u0) * u1 is
/// standard skew-normal with shape alpha.
pub fn skew_normal_draw<R: Rng>(rng: &mut R, params: SkewNormalParams) -> f64 {
    let delta =
        params.alpha_skew / (1.0 + params.alpha_skew * params.alpha_skew).sqrt();
    let v = sample_normal(rng, 0.0, 1.0);
    let w = sample_normal(rng, 0.0, 1.0);
    let u0 = delta * v + (1.0 - delta * delta).sqrt() * w;
    let z = if u0 >= 0.0 { v } else { -v };
    params.xi + params.omega * z
}

/// The skew-normal transition law of the simulation study: scale grows with
/// |z_prev| and the shape oscillates with z_prev.
pub fn skew_series_params(z_prev: f64) -> SkewNormalParams {
    SkewNormalParams {
        xi: 0.0,
        omega: 1.0 + 0.7 * z_prev.abs(),
        alpha_skew: 0.1 + 4.0 * z_prev.sin(),
    }
}

/// Standard Brownian motion path started at 0: unit-variance Gaussian
/// increments.
pub fn simulate_brownian(n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::domain("need at least 2 observations"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    out.push(0.0);
    for _ in 1..n {
        let prev = *out.last().unwrap();
        out.push(prev + sample_normal(&mut rng, 0.0, 1.0));
    }
    Ok(out)
}

/// Series driven by the skew-normal transition law, started at `z1`.
pub fn simulate_skew_normal_series(n: usize, z1: f64, seed: u64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::domain("need at least 2 observations"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    out.push(z1);
    for _ in 1..n {
        let prev = *out.last().unwrap();
        out.push(skew_normal_draw(&mut rng, skew_series_params(prev)));
    }
    Ok(out)
}

/// Ancestral simulation from a fitted transition mechanism, started at `z1`.
pub fn simulate_from_model<M: TransitionModel>(
    state: &M,
    z1: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n < 1 {
        return Err(Error::domain("need at least 1 observation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    out.push(z1);
    for _ in 1..n {
        let prev = *out.last().unwrap();
        out.push(state.sample_transition(prev, &mut rng));
    }
    Ok(out)
}
