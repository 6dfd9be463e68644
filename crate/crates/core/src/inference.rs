//! Posterior summaries computed from retained draws: density grids with
//! pointwise credible bands, forecast densities, conditional-expectation
//! curves, simulation-based multi-step forecasts, and one-step-ahead
//! posterior predictive ordinates for model comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MixtureState, TransitionModel};
use crate::stats::{log_sum_exp, normal_logpdf, quantile_sorted};

/// Provenance of a draws collection: which model produced it, from which
/// series, and with what run settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawsMeta {
    pub model: String,
    pub n: usize,
    pub truncation: usize,
    pub seed: u64,
    pub n_iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub data_checksum: u64,
    pub data_min: f64,
    pub data_max: f64,
    pub z_last: f64,
}

/// Thinned posterior draws of the general mixture model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub states: Vec<MixtureState>,
    pub meta: DrawsMeta,
}

/// Pointwise posterior summary over a grid: the draw average and equal-tailed
/// credible bounds (widened, if necessary, to contain the mean). Used both
/// for density products and for conditional-expectation curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub z: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::validation("evaluation grid must be nonempty"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation("evaluation grid must be strictly increasing"));
    }
    Ok(())
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::validation("credible level must lie in (0, 1)"));
    }
    Ok(())
}

fn summarize_columns(grid: &[f64], per_draw: &[Vec<f64>], level: f64) -> DensityGrid {
    let n_draws = per_draw.len();
    let q_lo = (1.0 - level) / 2.0;
    let q_hi = 1.0 - q_lo;
    let mut mean = Vec::with_capacity(grid.len());
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    let mut column = vec![0.0; n_draws];
    for gi in 0..grid.len() {
        for (j, row) in per_draw.iter().enumerate() {
            column[j] = row[gi];
        }
        let m = column.iter().sum::<f64>() / n_draws as f64;
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = quantile_sorted(&column, q_lo).min(m);
        let hi = quantile_sorted(&column, q_hi).max(m);
        mean.push(m);
        lower.push(lo);
        upper.push(hi);
    }
    DensityGrid { z: grid.to_vec(), mean, lower, upper, level }
}

/// Pointwise posterior mean and credible band of the transition density at a
/// fixed conditioning value.
pub fn transition_grid<M: TransitionModel>(
    draws: &[M],
    z_prev: f64,
    grid: &[f64],
    level: f64,
) -> Result<DensityGrid> {
    if draws.is_empty() {
        return Err(Error::validation("no posterior draws supplied"));
    }
    check_grid(grid)?;
    check_level(level)?;
    let per_draw: Vec<Vec<f64>> = draws
        .iter()
        .map(|s| {
            s.log_transition_density_grid(grid, z_prev)
                .into_iter()
                .map(f64::exp)
                .collect()
        })
        .collect();
    Ok(summarize_columns(grid, &per_draw, level))
}

/// Forecast density for the next observation: the transition grid at the
/// final observed value. Its mean curve is the posterior predictive density.
pub fn forecast_density<M: TransitionModel>(
    draws: &[M],
    z_n: f64,
    grid: &[f64],
    level: f64,
) -> Result<DensityGrid> {
    transition_grid(draws, z_n, grid, level)
}

/// Pointwise posterior mean and credible band of the conditional expectation
/// over a grid of conditioning values.
pub fn expectation_curve<M: TransitionModel>(
    draws: &[M],
    grid: &[f64],
    level: f64,
) -> Result<DensityGrid> {
    if draws.is_empty() {
        return Err(Error::validation("no posterior draws supplied"));
    }
    check_grid(grid)?;
    check_level(level)?;
    let per_draw: Vec<Vec<f64>> = draws
        .iter()
        .map(|s| grid.iter().map(|&z| s.conditional_expectation(z)).collect())
        .collect();
    Ok(summarize_columns(grid, &per_draw, level))
}

/// Simulation-based forecast distributions for horizons 1..=horizon: one
/// density grid per horizon plus the pooled raw samples.
pub struct MultiStepForecast {
    pub grids: Vec<DensityGrid>,
    pub samples: Vec<Vec<f64>>,
}

/// Simulate `paths_per_draw` trajectories ahead from `z_n` under each
/// retained draw. Per horizon, a Gaussian kernel estimate with a pooled
/// Silverman bandwidth gives one density curve per draw, summarized like the
/// analytic products.
pub fn multi_step_forecast<M: TransitionModel>(
    draws: &[M],
    z_n: f64,
    horizon: usize,
    paths_per_draw: usize,
    grid: &[f64],
    level: f64,
    seed: u64,
) -> Result<MultiStepForecast> {
    if draws.is_empty() {
        return Err(Error::validation("no posterior draws supplied"));
    }
    if horizon == 0 {
        return Err(Error::validation("horizon must be at least 1"));
    }
    if paths_per_draw == 0 {
        return Err(Error::validation("paths_per_draw must be at least 1"));
    }
    check_grid(grid)?;
    check_level(level)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // per_horizon[h][draw][path]
    let mut per_horizon: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(draws.len()); horizon];
    for state in draws {
        let mut rows: Vec<Vec<f64>> = vec![Vec::with_capacity(paths_per_draw); horizon];
        for _ in 0..paths_per_draw {
            let mut z = z_n;
            for row in rows.iter_mut() {
                z = state.sample_transition(z, &mut rng);
                row.push(z);
            }
        }
        for (h, row) in rows.into_iter().enumerate() {
            per_horizon[h].push(row);
        }
    }

    let mut grids = Vec::with_capacity(horizon);
    let mut samples = Vec::with_capacity(horizon);
    for by_draw in per_horizon {
        let pooled: Vec<f64> = by_draw.iter().flatten().copied().collect();
        let bw = silverman_bandwidth(&pooled).max(1e-9);
        let per_draw: Vec<Vec<f64>> = by_draw
            .iter()
            .map(|xs| {
                let ln_len = (xs.len() as f64).ln();
                grid.iter()
                    .map(|&g| {
                        let terms: Vec<f64> =
                            xs.iter().map(|&x| normal_logpdf(g, x, bw * bw)).collect();
                        (log_sum_exp(&terms) - ln_len).exp()
                    })
                    .collect()
            })
            .collect();
        grids.push(summarize_columns(grid, &per_draw, level));
        samples.push(pooled);
    }
    Ok(MultiStepForecast { grids, samples })
}

fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let sd = crate::stats::variance(xs).sqrt();
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// One-step-ahead posterior predictive ordinates p(z_t | z_(t-1)) computed
/// from a single fit to the full series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoResult {
    /// Time indices (1-based; t ranges over t_start..=n).
    pub t: Vec<usize>,
    pub log_ordinates: Vec<f64>,
    /// Effective sample size of the inverse-likelihood weights per ordinate;
    /// this estimator family is heavy-tailed and the ESS makes the
    /// instability visible.
    pub ess: Vec<f64>,
    pub log_sum: f64,
    /// Indices t whose ordinate came out non-finite.
    pub flagged: Vec<usize>,
}

/// Posterior predictive ordinates for t = t_start..=n.
///
/// The ordinate at t is a ratio of posterior averages of inverse likelihood
/// tail products: with C_j(t) = sum_{s=t}^n log f_j(z_s | z_{s-1}) under
/// draw j and A(t) = log mean_j exp(-C_j(t)), the log ordinate is
/// A(t+1) - A(t), where A(n+1) = 0 recovers the single-average form at
/// t = n. All accumulation is in log space.
pub fn ppo<M: TransitionModel>(draws: &[M], zs: &[f64], t_start: usize) -> Result<PpoResult> {
    if draws.is_empty() {
        return Err(Error::validation("no posterior draws supplied"));
    }
    let n = zs.len();
    if n < 3 {
        return Err(Error::validation("need at least 3 observations"));
    }
    if t_start < 3 || t_start > n {
        return Err(Error::validation(format!("t_start must lie in [3, {n}] (got {t_start})")));
    }
    let n_draws = draws.len();
    let log_n_draws = (n_draws as f64).ln();

    // logf[j][i] = log f_j(z_{i+2} | z_{i+1}) with 0-based pair index i = t - 2.
    let logf: Vec<Vec<f64>> = draws
        .iter()
        .map(|s| (0..n - 1).map(|i| s.log_transition_density(zs[i + 1], zs[i])).collect())
        .collect();

    let mut tail = vec![0.0f64; n_draws];
    let mut neg_tail = vec![0.0f64; n_draws];
    let mut doubled = vec![0.0f64; n_draws];
    let mut log_avg = vec![f64::NEG_INFINITY; n + 2];
    log_avg[n + 1] = 0.0;
    let mut ess_by_t = vec![f64::NAN; n + 2];
    for t in (2..=n).rev() {
        for (j, row) in logf.iter().enumerate() {
            tail[j] += row[t - 2];
            neg_tail[j] = -tail[j];
            doubled[j] = -2.0 * tail[j];
        }
        let lse = log_sum_exp(&neg_tail);
        log_avg[t] = lse - log_n_draws;
        ess_by_t[t] = (2.0 * lse - log_sum_exp(&doubled)).exp();
    }

    let mut t_idx = Vec::new();
    let mut logs = Vec::new();
    let mut ess = Vec::new();
    let mut flagged = Vec::new();
    let mut log_sum = 0.0;
    for t in t_start..=n {
        let lo = log_avg[t + 1] - log_avg[t];
        if !lo.is_finite() {
            flagged.push(t);
        }
        t_idx.push(t);
        logs.push(lo);
        ess.push(ess_by_t[t]);
        log_sum += lo;
    }
    Ok(PpoResult { t: t_idx, log_ordinates: logs, ess, log_sum, flagged })
}

/// Default evaluation grid: `points` values spanning the data range extended
/// by 25% of the range on each side.
pub fn default_grid(data_min: f64, data_max: f64, points: usize) -> Vec<f64> {
    let range = (data_max - data_min).max(1e-6);
    crate::stats::linspace(data_min - 0.25 * range, data_max + 0.25 * range, points.max(2))
}
