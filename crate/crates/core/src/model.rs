//! Mixture transition model: component parametrization, stick-breaking
//! weights, transition density and conditional expectation, and the
//! truncation-level rule. Everything here is pure and deterministic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{log_sum_exp, normal_logpdf, sample_normal};

/// One mixture component: locations of the weight kernel and the response,
/// the (negated) autoregressive slope, and the two variances from the
/// square-root-free Cholesky factorization of the bivariate kernel.
///
/// The Gaussian response kernel is `N(z | mu_y - beta * (z_prev - mu_x),
/// delta_y)` and the weight kernel is `N(z_prev | mu_x, delta_x)`. All
/// variances are variances, never standard deviations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentParams {
    pub mu_x: f64,
    pub mu_y: f64,
    pub beta: f64,
    pub delta_x: f64,
    pub delta_y: f64,
}

impl ComponentParams {
    pub fn new(mu_x: f64, mu_y: f64, beta: f64, delta_x: f64, delta_y: f64) -> Result<Self> {
        let c = ComponentParams { mu_x, mu_y, beta, delta_x, delta_y };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = self.mu_x.is_finite()
            && self.mu_y.is_finite()
            && self.beta.is_finite()
            && self.delta_x.is_finite()
            && self.delta_y.is_finite();
        if !all_finite {
            return Err(Error::domain("component parameters must be finite"));
        }
        if self.delta_x <= 0.0 || self.delta_y <= 0.0 {
            return Err(Error::domain("component variances must be positive"));
        }
        Ok(())
    }

    /// Mean of the response kernel given the previous state.
    pub fn response_mean(&self, z_prev: f64) -> f64 {
        self.mu_y - self.beta * (z_prev - self.mu_x)
    }

    /// Covariance (sigma_xx, sigma_yx, sigma_yy) of the bivariate normal
    /// kernel implied by inverting the square-root-free Cholesky
    /// factorization `Sigma = B^-1 Delta (B^-1)^T` with unit lower-triangular
    /// B carrying `beta` and Delta = diag(delta_x, delta_y).
    pub fn joint_covariance(&self) -> (f64, f64, f64) {
        let sxx = self.delta_x;
        let syx = -self.beta * self.delta_x;
        let syy = self.delta_y + self.beta * self.beta * self.delta_x;
        (sxx, syx, syy)
    }
}

/// Latent stick variables zeta_1..zeta_{L-1}, each in (0, 1), determining a
/// weight vector of length L. Weights follow `p_1 = 1 - zeta_1`,
/// `p_l = (1 - zeta_l) prod_{r<l} zeta_r`, `p_L = prod_r zeta_r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StickVector {
    zeta: Vec<f64>,
}

impl StickVector {
    pub fn new(zeta: Vec<f64>) -> Result<Self> {
        if zeta.iter().any(|z| !(*z > 0.0 && *z < 1.0)) {
            return Err(Error::domain("stick variables must lie strictly in (0, 1)"));
        }
        Ok(StickVector { zeta })
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    /// Number of mixture components (one more than the stick count).
    pub fn truncation(&self) -> usize {
        self.zeta.len() + 1
    }

    pub fn weights(&self) -> Vec<f64> {
        stick_weights_unchecked(&self.zeta)
    }

    pub fn log_weights(&self) -> Vec<f64> {
        log_stick_weights(&self.zeta)
    }
}

/// Map stick variables to the implied probability vector of length
/// `zeta.len() + 1`.
pub fn stick_break(zeta: &[f64]) -> Result<Vec<f64>> {
    if zeta.iter().any(|z| !(*z > 0.0 && *z < 1.0)) {
        return Err(Error::domain("stick variables must lie strictly in (0, 1)"));
    }
    Ok(stick_weights_unchecked(zeta))
}

fn stick_weights_unchecked(zeta: &[f64]) -> Vec<f64> {
    let mut weights = Vec::with_capacity(zeta.len() + 1);
    let mut remainder = 1.0;
    for &z in zeta {
        weights.push((1.0 - z) * remainder);
        remainder *= z;
    }
    weights.push(remainder);
    weights
}

/// Log stick-breaking weights, exact for remainders far below f64 underflow.
pub fn log_stick_weights(zeta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(zeta.len() + 1);
    let mut log_rem = 0.0;
    for &z in zeta {
        out.push((1.0 - z).ln() + log_rem);
        log_rem += z.ln();
    }
    out.push(log_rem);
    out
}

/// Hyperparameters psi of the component base distribution, plus the fixed
/// inverse-gamma shapes for the two variance components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub m_x: f64,
    pub v_x: f64,
    pub m_y: f64,
    pub v_y: f64,
    pub s_x: f64,
    pub s_y: f64,
    pub theta: f64,
    pub c: f64,
    pub nu_x: f64,
    pub nu_y: f64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positives = [self.v_x, self.v_y, self.s_x, self.s_y, self.c, self.nu_x, self.nu_y];
        if positives.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::domain("hyperparameter variances/scales/shapes must be positive"));
        }
        if !self.m_x.is_finite() || !self.m_y.is_finite() || !self.theta.is_finite() {
            return Err(Error::domain("hyperparameter locations must be finite"));
        }
        Ok(())
    }
}

/// Complete mixture: L components, stick variables, precision alpha and
/// base-distribution hyperparameters. One posterior draw is one such value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    pub components: Vec<ComponentParams>,
    pub sticks: StickVector,
    pub alpha: f64,
    pub psi: Hyperparams,
}

impl MixtureState {
    pub fn truncation(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.len() != self.sticks.truncation() {
            return Err(Error::domain("component count must equal stick truncation level"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::domain("alpha must be positive"));
        }
        for c in &self.components {
            c.validate()?;
        }
        self.psi.validate()
    }

    /// Normalized state-dependent weights q_l(z_prev), computed in log space
    /// with max subtraction.
    pub fn transition_weights(&self, z_prev: f64) -> Vec<f64> {
        let lw = self.log_transition_weights(z_prev);
        lw.iter().map(|w| w.exp()).collect()
    }

    /// Log of the normalized weights q_l(z_prev).
    pub fn log_transition_weights(&self, z_prev: f64) -> Vec<f64> {
        let mut lw = self.unnormalized_log_weights(z_prev);
        let norm = log_sum_exp(&lw);
        assert!(norm.is_finite(), "transition weights degenerate at z_prev = {z_prev}");
        for w in &mut lw {
            *w -= norm;
        }
        lw
    }

    fn unnormalized_log_weights(&self, z_prev: f64) -> Vec<f64> {
        let logp = self.sticks.log_weights();
        self.components
            .iter()
            .zip(logp)
            .map(|(c, lp)| lp + normal_logpdf(z_prev, c.mu_x, c.delta_x))
            .collect()
    }

    /// Transition density f(z | z_prev) of the weight-localized mixture of
    /// Gaussian autoregressions.
    pub fn transition_density(&self, z: f64, z_prev: f64) -> f64 {
        self.log_transition_density(z, z_prev).exp()
    }

    pub fn log_transition_density(&self, z: f64, z_prev: f64) -> f64 {
        let lw = self.unnormalized_log_weights(z_prev);
        let norm = log_sum_exp(&lw);
        assert!(norm.is_finite(), "transition weights degenerate at z_prev = {z_prev}");
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&lw)
            .map(|(c, w)| w + normal_logpdf(z, c.response_mean(z_prev), c.delta_y))
            .collect();
        log_sum_exp(&terms) - norm
    }

    /// Transition density evaluated through the reconstructed bivariate
    /// normal kernels: each component covariance is rebuilt from
    /// (beta, delta_x, delta_y) and the conditional mean/variance are taken
    /// from the standard bivariate-normal conditioning formulas. Exists as an
    /// independent algebraic route for testing the reparametrized form.
    pub fn transition_density_via_joint(&self, z: f64, z_prev: f64) -> f64 {
        let logp = self.sticks.log_weights();
        let mut lw = Vec::with_capacity(self.components.len());
        let mut terms = Vec::with_capacity(self.components.len());
        for (c, lp) in self.components.iter().zip(logp) {
            let (sxx, syx, syy) = c.joint_covariance();
            let w = lp + normal_logpdf(z_prev, c.mu_x, sxx);
            let cond_mean = c.mu_y + syx / sxx * (z_prev - c.mu_x);
            let cond_var = syy - syx * syx / sxx;
            assert!(cond_var > 0.0, "conditional variance must stay positive");
            lw.push(w);
            terms.push(w + normal_logpdf(z, cond_mean, cond_var));
        }
        let norm = log_sum_exp(&lw);
        assert!(norm.is_finite());
        (log_sum_exp(&terms) - norm).exp()
    }

    /// E(Z_t | Z_{t-1} = z_prev), a mixture of lines with state-dependent
    /// weights.
    pub fn conditional_expectation(&self, z_prev: f64) -> f64 {
        let q = self.transition_weights(z_prev);
        self.components
            .iter()
            .zip(q)
            .map(|(c, w)| w * c.response_mean(z_prev))
            .sum()
    }
}

/// A fitted transition mechanism: everything the inference layer needs from
/// a posterior draw, regardless of which model produced it.
pub trait TransitionModel {
    fn log_transition_density(&self, z: f64, z_prev: f64) -> f64;

    fn transition_density(&self, z: f64, z_prev: f64) -> f64 {
        self.log_transition_density(z, z_prev).exp()
    }

    fn conditional_expectation(&self, z_prev: f64) -> f64;

    /// Ancestral draw of the next observation given the previous one.
    fn sample_transition<R: Rng>(&self, z_prev: f64, rng: &mut R) -> f64;

    /// Log densities over a grid sharing one conditioning value. The default
    /// just loops; implementations can hoist per-z_prev work.
    fn log_transition_density_grid(&self, zs: &[f64], z_prev: f64) -> Vec<f64> {
        zs.iter().map(|&z| self.log_transition_density(z, z_prev)).collect()
    }
}

impl TransitionModel for MixtureState {
    fn log_transition_density(&self, z: f64, z_prev: f64) -> f64 {
        MixtureState::log_transition_density(self, z, z_prev)
    }

    fn conditional_expectation(&self, z_prev: f64) -> f64 {
        MixtureState::conditional_expectation(self, z_prev)
    }

    fn sample_transition<R: Rng>(&self, z_prev: f64, rng: &mut R) -> f64 {
        let lw = self.log_transition_weights(z_prev);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (l, w) in lw.iter().enumerate() {
            acc += w.exp();
            if u < acc {
                pick = l;
                break;
            }
        }
        let c = &self.components[pick];
        sample_normal(rng, c.response_mean(z_prev), c.delta_y)
    }

    fn log_transition_density_grid(&self, zs: &[f64], z_prev: f64) -> Vec<f64> {
        let lw = self.log_transition_weights(z_prev);
        let means: Vec<f64> =
            self.components.iter().map(|c| c.response_mean(z_prev)).collect();
        let mut terms = vec![0.0; lw.len()];
        zs.iter()
            .map(|&z| {
                for (l, c) in self.components.iter().enumerate() {
                    terms[l] = lw[l] + normal_logpdf(z, means[l], c.delta_y);
                }
                log_sum_exp(&terms)
            })
            .collect()
    }
}

/// Expected partial sum of the first `l` untruncated stick-breaking weights
/// at a fixed precision alpha: `1 - (alpha / (alpha + 1))^l`.
pub fn expected_partial_sum_fixed(alpha: f64, l: usize) -> f64 {
    1.0 - (alpha / (alpha + 1.0)).powi(l as i32)
}

/// Smallest truncation level whose expected partial weight sum at fixed
/// alpha reaches `1 - tolerance`.
pub fn choose_truncation_fixed(alpha: f64, tolerance: f64) -> Result<usize> {
    check_tolerance(tolerance)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::domain("alpha must be positive"));
    }
    // (alpha/(alpha+1))^L <= tol  <=>  L >= log(tol) / log(alpha/(alpha+1))
    let l = (tolerance.ln() / (alpha / (alpha + 1.0)).ln()).ceil();
    Ok((l as usize).max(1))
}

/// Monte Carlo estimate of the expected partial weight sum at level `l`,
/// averaging `1 - (alpha/(alpha+1))^l` over alpha ~ Gamma(a_alpha, b_alpha)
/// (shape/rate).
pub fn expected_partial_sum(
    a_alpha: f64,
    b_alpha: f64,
    l: usize,
    mc_draws: usize,
    seed: u64,
) -> f64 {
    let ratios = prior_ratios(a_alpha, b_alpha, mc_draws, seed);
    let mean_pow: f64 =
        ratios.iter().map(|r| r.powi(l as i32)).sum::<f64>() / mc_draws as f64;
    1.0 - mean_pow
}

/// Smallest truncation level L whose partial weight sum, averaged over the
/// Gamma(a_alpha, b_alpha) prior by Monte Carlo, reaches `1 - tolerance`.
/// The same alpha draws are reused across levels, which makes the selected L
/// exactly monotone in the tolerance.
pub fn choose_truncation(
    a_alpha: f64,
    b_alpha: f64,
    tolerance: f64,
    mc_draws: usize,
    seed: u64,
) -> Result<usize> {
    check_tolerance(tolerance)?;
    if mc_draws < 10_000 {
        return Err(Error::domain("truncation selection needs at least 10^4 Monte Carlo draws"));
    }
    let ratios = prior_ratios(a_alpha, b_alpha, mc_draws, seed);
    let mut pows = ratios.clone();
    let inv = 1.0 / mc_draws as f64;
    for l in 1..=100_000usize {
        let mean_pow: f64 = pows.iter().sum::<f64>() * inv;
        if mean_pow <= tolerance {
            return Ok(l);
        }
        for (p, r) in pows.iter_mut().zip(&ratios) {
            *p *= r;
        }
    }
    Err(Error::numerical(
        "truncation search exceeded L = 100000; tolerance is too small for this prior",
    ))
}

fn prior_ratios(a_alpha: f64, b_alpha: f64, mc_draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..mc_draws)
        .map(|_| {
            let a = crate::stats::sample_gamma(&mut rng, a_alpha, b_alpha);
            a / (a + 1.0)
        })
        .collect()
}

fn check_tolerance(tolerance: f64) -> Result<()> {
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(Error::domain("tolerance must lie in (0, 1)"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{linspace, trapezoid};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn filler_psi() -> Hyperparams {
        Hyperparams {
            m_x: 0.0,
            v_x: 1.0,
            m_y: 0.0,
            v_y: 1.0,
            s_x: 1.0,
            s_y: 1.0,
            theta: 0.0,
            c: 1.0,
            nu_x: 2.0,
            nu_y: 2.0,
        }
    }

    fn state_from(components: Vec<ComponentParams>, zeta: Vec<f64>) -> MixtureState {
        MixtureState {
            components,
            sticks: StickVector::new(zeta).unwrap(),
            alpha: 1.0,
            psi: filler_psi(),
        }
    }

    fn random_state(r: &mut ChaCha8Rng, truncation: usize) -> MixtureState {
        let components = (0..truncation)
            .map(|_| ComponentParams {
                mu_x: r.random_range(-3.0..3.0),
                mu_y: r.random_range(-3.0..3.0),
                beta: r.random_range(-1.5..1.5),
                delta_x: r.random_range(0.2..3.0),
                delta_y: r.random_range(0.2..3.0),
            })
            .collect();
        let zeta = (0..truncation - 1).map(|_| r.random_range(0.05..0.95)).collect();
        state_from(components, zeta)
    }

    /// Quadrature span covering every component's response kernel out to
    /// `k` conditional standard deviations.
    fn response_span(state: &MixtureState, z_prev: f64, k: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &state.components {
            let m = c.response_mean(z_prev);
            let sd = c.delta_y.sqrt();
            lo = lo.min(m - k * sd);
            hi = hi.max(m + k * sd);
        }
        (lo, hi)
    }

    #[test]
    fn stick_break_small_cases() {
        let p = stick_break(&[0.5, 0.5]).unwrap();
        assert_eq!(p, vec![0.5, 0.25, 0.25]);
        let p = stick_break(&[0.3]).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-15 && (p[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn stick_break_cumulative_products() {
        // Hand-computed: remainders 0.9, 0.72, 0.504, 0.3024.
        let p = stick_break(&[0.9, 0.8, 0.7, 0.6]).unwrap();
        let expect = [0.1, 0.18, 0.216, 0.2016, 0.3024];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stick_break_rejects_out_of_range() {
        assert!(stick_break(&[0.0]).is_err());
        assert!(stick_break(&[1.0]).is_err());
        assert!(stick_break(&[0.5, -0.1]).is_err());
        assert!(stick_break(&[f64::NAN]).is_err());
    }

    #[test]
    fn stick_break_is_a_probability_vector() {
        let mut r = rng(42);
        for _ in 0..10_000 {
            let l = r.random_range(2..40usize);
            let zeta: Vec<f64> =
                (0..l - 1).map(|_| r.random_range(1e-6..1.0 - 1e-6)).collect();
            let p = stick_break(&zeta).unwrap();
            assert_eq!(p.len(), l);
            assert!(p.iter().all(|w| (0.0..=1.0).contains(w)));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn log_stick_weights_match_linear(zeta in proptest::collection::vec(1e-3f64..0.999, 1..20)) {
            let p = stick_break(&zeta).unwrap();
            let lp = log_stick_weights(&zeta);
            for (a, b) in p.iter().zip(lp) {
                prop_assert!((a.ln() - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transition_weights_single_component() {
        let s = state_from(vec![ComponentParams::new(0.0, 0.0, 0.0, 1.0, 1.0).unwrap()], vec![]);
        assert_eq!(s.transition_weights(123.4), vec![1.0]);
    }

    #[test]
    fn transition_weights_identical_kernels() {
        let c = ComponentParams::new(0.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        let s = state_from(vec![c, c], vec![0.5]);
        for z in [-7.0, 0.0, 3.3] {
            let q = s.transition_weights(z);
            assert!((q[0] - 0.5).abs() < 1e-12 && (q[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn transition_weights_gaussian_ordinate_ratio() {
        let c1 = ComponentParams::new(-2.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        let c2 = ComponentParams::new(2.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        let s = state_from(vec![c1, c2], vec![0.5]);
        let q0 = s.transition_weights(0.0);
        assert!((q0[0] - 0.5).abs() < 1e-12);
        // At z_prev = 2 the kernel ordinates are e^{-8} and 1 (up to the
        // shared constant), so q = (e^-8/(1+e^-8), 1/(1+e^-8)).
        let q2 = s.transition_weights(2.0);
        let e8 = (-8.0f64).exp();
        assert!((q2[0] - e8 / (1.0 + e8)).abs() < 1e-14);
        assert!((q2[1] - 1.0 / (1.0 + e8)).abs() < 1e-14);
    }

    #[test]
    fn transition_weights_survive_underflow_region() {
        // Both kernels underflow in linear space at this distance; the ratio
        // is still exact because only log differences enter.
        let c1 = ComponentParams::new(0.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        let c2 = ComponentParams::new(1.0, 0.0, 0.0, 1.0, 1.0).unwrap();
        let s = state_from(vec![c1, c2], vec![0.5]);
        let z = 300.0;
        let q = s.transition_weights(z);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // log ratio q1/q2 = -0.5 z^2 + 0.5 (z-1)^2 = -z + 0.5
        let expect = (-z + 0.5f64).exp() / (1.0 + (-z + 0.5f64).exp());
        assert!((q[0] - expect).abs() < 1e-12);
        assert!(q[1] > 0.999);
    }

    #[test]
    fn transition_density_decoupled_ordinate() {
        let s = state_from(vec![ComponentParams::new(0.0, 0.0, 0.0, 1.0, 1.0).unwrap()], vec![]);
        assert!((s.transition_density(0.0, 5.0) - 0.398_942_280_401_432_7).abs() < 1e-12);
    }

    #[test]
    fn transition_density_random_walk_kernel() {
        // beta = -1 makes the response mean equal z_prev.
        let s = state_from(vec![ComponentParams::new(0.0, 0.0, -1.0, 1.0, 1.0).unwrap()], vec![]);
        assert!((s.transition_density(3.0, 3.0) - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert!((s.conditional_expectation(3.0) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn transition_density_integrates_to_one_fixed_grid() {
        let mut r = rng(7);
        let s = random_state(&mut r, 4);
        let grid = linspace(-40.0, 40.0, 1 << 14);
        for z_prev in [-1.2, 0.0, 2.4] {
            let vals: Vec<f64> = grid.iter().map(|&z| s.transition_density(z, z_prev)).collect();
            let total = trapezoid(&grid, &vals);
            assert!((total - 1.0).abs() < 1e-6, "integral {total} at z_prev {z_prev}");
        }
    }

    #[test]
    fn transition_density_integrates_to_one_component_spans() {
        let mut r = rng(21);
        for trial in 0..20 {
            let l = r.random_range(2..=30usize);
            let s = random_state(&mut r, l);
            let z_prev = r.random_range(-4.0..4.0);
            let (lo, hi) = response_span(&s, z_prev, 8.0);
            let grid = linspace(lo, hi, 1 << 14);
            let vals: Vec<f64> = grid.iter().map(|&z| s.transition_density(z, z_prev)).collect();
            let total = trapezoid(&grid, &vals);
            assert!((total - 1.0).abs() < 1e-6, "trial {trial}: integral {total}");
        }
    }

    #[test]
    fn joint_covariance_hand_value() {
        let c = ComponentParams::new(0.0, 0.0, 0.5, 2.0, 1.0).unwrap();
        let (sxx, syx, syy) = c.joint_covariance();
        assert_eq!((sxx, syx, syy), (2.0, -1.0, 1.5));
    }

    #[test]
    fn via_joint_matches_reparametrized_density() {
        let mut r = rng(99);
        for _ in 0..1000 {
            let l = r.random_range(1..=6usize);
            let s = random_state(&mut r, l);
            let z_prev = r.random_range(-5.0..5.0);
            let z = r.random_range(-5.0..5.0);
            let a = s.transition_density(z, z_prev);
            let b = s.transition_density_via_joint(z, z_prev);
            assert!(
                (a - b).abs() <= 1e-10 * a.abs().max(1e-300),
                "mismatch {a} vs {b}"
            );
        }
    }

    #[test]
    fn via_joint_beta_zero_ignores_z_prev() {
        let s = state_from(vec![ComponentParams::new(0.4, -0.3, 0.0, 1.3, 0.8).unwrap()], vec![]);
        let a = s.transition_density_via_joint(0.2, -10.0);
        let b = s.transition_density_via_joint(0.2, 10.0);
        assert!((a - b).abs() < 1e-14);
        assert!((a - crate::stats::normal_pdf(0.2, -0.3, 0.8)).abs() < 1e-14);
    }

    #[test]
    fn conditional_expectation_flat_mixture() {
        let c1 = ComponentParams::new(-1.0, 2.5, 0.0, 1.0, 1.0).unwrap();
        let c2 = ComponentParams::new(1.5, 2.5, 0.0, 0.5, 2.0).unwrap();
        let s = state_from(vec![c1, c2], vec![0.4]);
        for z in [-3.0, 0.0, 4.0] {
            assert!((s.conditional_expectation(z) - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_expectation_two_line_average_at_midpoint() {
        // Symmetric weight kernels around 0 with equal sticks put weight 1/2
        // on each line at z_prev = 0; lines evaluate to mu_y - beta*(0 - mu_x).
        let c1 = ComponentParams::new(-2.0, 1.0, 0.7, 1.0, 1.0).unwrap();
        let c2 = ComponentParams::new(2.0, -1.0, -0.7, 1.0, 1.0).unwrap();
        let s = state_from(vec![c1, c2], vec![0.5]);
        let line1 = 1.0 - 0.7 * (0.0 - -2.0);
        let line2 = -1.0 - -0.7 * (0.0 - 2.0);
        let expect = 0.5 * (line1 + line2);
        assert!((s.conditional_expectation(0.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn conditional_expectation_matches_quadrature_mean() {
        let mut r = rng(5);
        for _ in 0..10 {
            let s = random_state(&mut r, 5);
            let z_prev = r.random_range(-2.0..2.0);
            let (lo, hi) = response_span(&s, z_prev, 10.0);
            let grid = linspace(lo, hi, 1 << 14);
            let vals: Vec<f64> =
                grid.iter().map(|&z| z * s.transition_density(z, z_prev)).collect();
            let quad_mean = trapezoid(&grid, &vals);
            assert!(
                (s.conditional_expectation(z_prev) - quad_mean).abs() < 1e-5,
                "{} vs {}",
                s.conditional_expectation(z_prev),
                quad_mean
            );
        }
    }

    #[test]
    fn truncation_fixed_alpha_closed_form() {
        // 1 - (1/2)^10 = 0.9990234375 is the first level past 0.999.
        assert_eq!(choose_truncation_fixed(1.0, 1e-3).unwrap(), 10);
        assert!((expected_partial_sum_fixed(1.0, 10) - 0.999_023_437_5).abs() < 1e-12);
        assert!(expected_partial_sum_fixed(1.0, 9) < 0.999);
    }

    #[test]
    fn truncation_rejects_bad_inputs() {
        assert!(choose_truncation_fixed(1.0, 0.0).is_err());
        assert!(choose_truncation_fixed(1.0, 1.0).is_err());
        assert!(choose_truncation(0.5, 0.5, 1e-3, 100, 1).is_err());
    }

    #[test]
    fn truncation_monotone_in_tolerance() {
        let mut last = usize::MAX;
        for tol in [1e-1, 1e-2, 1e-3, 1e-4] {
            let l = choose_truncation(0.5, 0.5, tol, 20_000, 11).unwrap();
            assert!(l <= last, "L must not grow as the tolerance loosens");
            last = l;
        }
    }

    /// Simpson-rule oracle for E[1 - (alpha/(alpha+1))^L] under a
    /// Gamma(0.5, 0.5) prior. Substituting alpha = u^2 turns the density
    /// into the half-normal sqrt(2/pi) exp(-u^2/2), removing the endpoint
    /// singularity.
    fn partial_sum_oracle_gamma_half(l: usize) -> f64 {
        let n = 4800usize;
        let hi = 12.0;
        let h = hi / n as f64;
        let f = |u: f64| {
            let a = u * u;
            let val = 1.0 - (a / (a + 1.0)).powi(l as i32);
            val * (2.0 / std::f64::consts::PI).sqrt() * (-0.5 * u * u).exp()
        };
        let mut acc = f(0.0) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(h * i as f64);
        }
        acc * h / 3.0
    }

    #[test]
    fn truncation_mc_matches_quadrature_oracle() {
        // MC standard error at 10^5 draws is ~1.5e-5 (L=30) and ~3e-6 (L=50).
        let cases = [(30usize, 6e-5), (50usize, 1.5e-5)];
        for (l, tol) in cases {
            let oracle = partial_sum_oracle_gamma_half(l);
            let mc = expected_partial_sum(0.5, 0.5, l, 100_000, 17);
            assert!((mc - oracle).abs() < tol, "L={l}: mc {mc} vs oracle {oracle}");
        }
    }
}
