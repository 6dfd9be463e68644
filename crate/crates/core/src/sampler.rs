//! Posterior simulation for the general mixture model: per-sweep Gibbs and
//! Metropolis updates for configuration labels, component parameters, stick
//! variables (slice sampler with truncated-beta draws), the precision alpha,
//! and the base-distribution hyperparameters.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{DrawsMeta, PosteriorDraws};
use crate::model::{log_stick_weights, ComponentParams, Hyperparams, MixtureState, StickVector};
use crate::stats::{
    inverse_gamma_logpdf, log_sum_exp, log_sum_replace, normal_logpdf, normal_normal_posterior,
    sample_beta, sample_gamma, sample_inverse_gamma, sample_normal, sample_truncated_beta,
    variance,
};

/// Fixed constants of the hierarchical prior: the hyperprior parameters for
/// every component of psi, the inverse-gamma shapes for the two kernel
/// variances, the gamma prior on the precision, and the truncation level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperpriorConfig {
    pub a_m_x: f64,
    pub b_m_x: f64,
    pub a_m_y: f64,
    pub b_m_y: f64,
    pub a_v_x: f64,
    pub b_v_x: f64,
    pub a_v_y: f64,
    pub b_v_y: f64,
    pub a_s_x: f64,
    pub b_s_x: f64,
    pub a_s_y: f64,
    pub b_s_y: f64,
    pub a_theta: f64,
    pub b_theta: f64,
    pub a_c: f64,
    pub b_c: f64,
    pub nu_x: f64,
    pub nu_y: f64,
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub truncation: usize,
}

impl HyperpriorConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("b_m_x", self.b_m_x),
            ("b_m_y", self.b_m_y),
            ("a_v_x", self.a_v_x),
            ("b_v_x", self.b_v_x),
            ("a_v_y", self.a_v_y),
            ("b_v_y", self.b_v_y),
            ("a_s_x", self.a_s_x),
            ("b_s_x", self.b_s_x),
            ("a_s_y", self.a_s_y),
            ("b_s_y", self.b_s_y),
            ("b_theta", self.b_theta),
            ("a_c", self.a_c),
            ("b_c", self.b_c),
            ("nu_x", self.nu_x),
            ("nu_y", self.nu_y),
            ("a_alpha", self.a_alpha),
            ("b_alpha", self.b_alpha),
        ];
        for (name, v) in positives {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be positive and finite")));
            }
        }
        if !self.a_m_x.is_finite() || !self.a_m_y.is_finite() || !self.a_theta.is_finite() {
            return Err(Error::validation("prior means must be finite"));
        }
        if self.a_c <= 1.0 {
            return Err(Error::validation(
                "a_c must exceed 1 so the slope-variance prior has a finite mean",
            ));
        }
        if self.truncation < 1 {
            return Err(Error::validation("truncation level must be at least 1"));
        }
        Ok(())
    }

    /// Hyperparameters drawn from their hyperpriors.
    pub fn sample_prior_psi<R: Rng>(&self, rng: &mut R) -> Hyperparams {
        Hyperparams {
            m_x: sample_normal(rng, self.a_m_x, self.b_m_x),
            v_x: sample_inverse_gamma(rng, self.a_v_x, self.b_v_x),
            m_y: sample_normal(rng, self.a_m_y, self.b_m_y),
            v_y: sample_inverse_gamma(rng, self.a_v_y, self.b_v_y),
            s_x: sample_gamma(rng, self.a_s_x, self.b_s_x),
            s_y: sample_gamma(rng, self.a_s_y, self.b_s_y),
            theta: sample_normal(rng, self.a_theta, self.b_theta),
            c: sample_inverse_gamma(rng, self.a_c, self.b_c),
            nu_x: self.nu_x,
            nu_y: self.nu_y,
        }
    }

    /// One component drawn from the base distribution given psi.
    pub fn sample_component<R: Rng>(psi: &Hyperparams, rng: &mut R) -> ComponentParams {
        ComponentParams {
            mu_x: sample_normal(rng, psi.m_x, psi.v_x),
            mu_y: sample_normal(rng, psi.m_y, psi.v_y),
            beta: sample_normal(rng, psi.theta, psi.c),
            delta_x: sample_inverse_gamma(rng, psi.nu_x, psi.s_x),
            delta_y: sample_inverse_gamma(rng, psi.nu_y, psi.s_y),
        }
    }

    /// A full mixture state drawn from the prior (used by prior-predictive
    /// checks and tests).
    pub fn sample_prior_state<R: Rng>(&self, rng: &mut R) -> MixtureState {
        let psi = self.sample_prior_psi(rng);
        let alpha = sample_gamma(rng, self.a_alpha, self.b_alpha);
        let zeta: Vec<f64> = (0..self.truncation - 1)
            .map(|_| sample_beta(rng, alpha, 1.0).clamp(1e-12, 1.0 - 1e-12))
            .collect();
        let components =
            (0..self.truncation).map(|_| Self::sample_component(&psi, rng)).collect();
        MixtureState {
            components,
            sticks: StickVector::new(zeta).expect("clamped sticks are valid"),
            alpha,
            psi,
        }
    }
}

/// Run-length, thinning, proposal-scale and reproducibility settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub n_iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    /// Random-walk sd for mu_x proposals; `None` uses 0.1 * (data range / 4).
    pub rw_scale_mu_x: Option<f64>,
    /// Random-walk sd for log delta_x proposals.
    pub rw_scale_log_delta_x: Option<f64>,
    /// Robbins-Monro adaptation of the proposal scales during burn-in only.
    pub adapt: bool,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            n_iterations: 110_000,
            burn_in: 10_000,
            thin: 20,
            rw_scale_mu_x: None,
            rw_scale_log_delta_x: None,
            adapt: true,
            seed: 1,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iterations {
            return Err(Error::validation("burn_in must be smaller than n_iterations"));
        }
        if self.thin == 0 {
            return Err(Error::validation("thin must be at least 1"));
        }
        for s in [self.rw_scale_mu_x, self.rw_scale_log_delta_x].into_iter().flatten() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::validation("proposal scales must be positive"));
            }
        }
        Ok(())
    }

    pub fn retained_draws(&self) -> u64 {
        (self.n_iterations - self.burn_in) / self.thin
    }
}

/// Serializable position of the deterministic generator: reseeding from
/// `seed` and fast-forwarding to the stored word position reproduces the
/// stream exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState { seed, word_pos_lo: pos as u64, word_pos_hi: (pos >> 64) as u64 }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// Complete chain state: everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub mixture: MixtureState,
    /// Component label per transition pair (0-based, length n - 1).
    pub labels: Vec<usize>,
    pub iteration: u64,
    pub rng: RngState,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptCounter {
    pub proposals: u64,
    pub accepts: u64,
}

impl AcceptCounter {
    pub fn rate(&self) -> f64 {
        if self.proposals == 0 {
            f64::NAN
        } else {
            self.accepts as f64 / self.proposals as f64
        }
    }

    fn record(&mut self, accepted: bool) {
        self.proposals += 1;
        if accepted {
            self.accepts += 1;
        }
    }
}

/// Per-run bookkeeping: random-walk acceptance per component (post burn-in
/// and burn-in kept separately), slice-sampler invariant violations, and the
/// occupied-component trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub accept_mu_x: Vec<AcceptCounter>,
    pub accept_delta_x: Vec<AcceptCounter>,
    pub burnin_accept_mu_x: Vec<AcceptCounter>,
    pub burnin_accept_delta_x: Vec<AcceptCounter>,
    pub slice_violations: u64,
    pub max_occupied: usize,
    /// (iteration, occupied components), sampled every 100 sweeps.
    pub occupancy_trace: Vec<(u64, usize)>,
}

/// Versioned checkpoint of a general-model run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralCheckpoint {
    pub version: u32,
    pub config: HyperpriorConfig,
    pub settings: SamplerSettings,
    pub data_checksum: u64,
    pub chain: ChainState,
    pub scale_mu_x: Vec<f64>,
    pub scale_log_delta_x: Vec<f64>,
    pub adapt_steps_mu: Vec<u64>,
    pub adapt_steps_delta: Vec<u64>,
    pub retained: Vec<MixtureState>,
    pub diag: Diagnostics,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Gibbs/Metropolis sampler for the general mixture model. One instance owns
/// one chain; sweeps are sequential and deterministic given the seed.
pub struct GeneralSampler {
    zs: Vec<f64>,
    m: usize,
    cfg: HyperpriorConfig,
    settings: SamplerSettings,

    comp: Vec<ComponentParams>,
    zeta: Vec<f64>,
    alpha: f64,
    psi: Hyperparams,
    labels: Vec<usize>,
    iteration: u64,
    rng: ChaCha8Rng,

    occ: Vec<usize>,
    log_p: Vec<f64>,
    /// Weight-kernel log ordinates, row-major (pair i, component l).
    logk: Vec<f64>,
    /// Cached log of the weight-mixture denominator per pair.
    logd: Vec<f64>,

    scale_mu_x: Vec<f64>,
    scale_log_delta_x: Vec<f64>,
    adapt_steps_mu: Vec<u64>,
    adapt_steps_delta: Vec<u64>,

    retained: Vec<MixtureState>,
    diag: Diagnostics,
}

impl GeneralSampler {
    pub fn new(data: &[f64], cfg: &HyperpriorConfig, settings: &SamplerSettings) -> Result<Self> {
        cfg.validate()?;
        settings.validate()?;
        validate_series(data)?;
        let l = cfg.truncation;
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);

        let psi = initial_psi(cfg);
        let alpha0 = cfg.a_alpha / cfg.b_alpha;
        let zeta = vec![(alpha0 / (alpha0 + 1.0)).clamp(1e-6, 1.0 - 1e-6); l.saturating_sub(1)];
        let (mut comp, labels) = initial_components(data, l, &psi, &mut rng);
        for c in &mut comp {
            c.validate()?;
        }

        let m = data.len() - 1;
        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let default_scale = (0.1 * (hi - lo) / 4.0).max(1e-3);
        let scale_mu = settings.rw_scale_mu_x.unwrap_or(default_scale);
        let scale_ld = settings.rw_scale_log_delta_x.unwrap_or(0.4);

        let mut s = GeneralSampler {
            zs: data.to_vec(),
            m,
            cfg: *cfg,
            settings: *settings,
            comp,
            zeta,
            alpha: alpha0,
            psi,
            labels,
            iteration: 0,
            rng,
            occ: vec![0; l],
            log_p: vec![0.0; l],
            logk: vec![0.0; m * l],
            logd: vec![0.0; m],
            scale_mu_x: vec![scale_mu; l],
            scale_log_delta_x: vec![scale_ld; l],
            adapt_steps_mu: vec![0; l],
            adapt_steps_delta: vec![0; l],
            retained: Vec::new(),
            diag: Diagnostics {
                accept_mu_x: vec![AcceptCounter::default(); l],
                accept_delta_x: vec![AcceptCounter::default(); l],
                burnin_accept_mu_x: vec![AcceptCounter::default(); l],
                burnin_accept_delta_x: vec![AcceptCounter::default(); l],
                ..Diagnostics::default()
            },
        };
        s.sync_caches();
        let ll = s.log_likelihood();
        if !ll.is_finite() {
            return Err(Error::numerical(format!(
                "initial state has non-finite log likelihood ({ll}); \
                 check the data scale against the prior configuration"
            )));
        }
        Ok(s)
    }

    pub fn truncation(&self) -> usize {
        self.cfg.truncation
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn settings(&self) -> &SamplerSettings {
        &self.settings
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diag
    }

    pub fn retained(&self) -> &[MixtureState] {
        &self.retained
    }

    pub fn occupied_components(&self) -> usize {
        self.occ.iter().filter(|&&c| c > 0).count()
    }

    pub fn occupancy(&self) -> &[usize] {
        &self.occ
    }

    /// Log likelihood of the series under the current state, conditional on
    /// the first observation.
    pub fn log_likelihood(&self) -> f64 {
        let state = self.snapshot();
        (0..self.m).map(|i| state.log_transition_density(self.zs[i + 1], self.zs[i])).sum()
    }

    pub fn snapshot(&self) -> MixtureState {
        MixtureState {
            components: self.comp.clone(),
            sticks: StickVector::new(self.zeta.clone()).expect("sticks stay in (0,1)"),
            alpha: self.alpha,
            psi: self.psi,
        }
    }

    pub fn chain_state(&self) -> ChainState {
        ChainState {
            mixture: self.snapshot(),
            labels: self.labels.clone(),
            iteration: self.iteration,
            rng: RngState::capture(self.settings.seed, &self.rng),
        }
    }

    /// Replace the chain state wholesale (resume path and tests); caches are
    /// rebuilt from scratch.
    pub fn set_chain_state(&mut self, st: &ChainState) -> Result<()> {
        st.mixture.validate()?;
        if st.mixture.truncation() != self.cfg.truncation {
            return Err(Error::validation("state truncation does not match configuration"));
        }
        if st.labels.len() != self.m {
            return Err(Error::validation("label vector length must equal n - 1"));
        }
        if st.labels.iter().any(|&l| l >= self.cfg.truncation) {
            return Err(Error::validation("labels must index a component"));
        }
        self.comp = st.mixture.components.clone();
        self.zeta = st.mixture.sticks.zeta().to_vec();
        self.alpha = st.mixture.alpha;
        self.psi = st.mixture.psi;
        self.labels = st.labels.clone();
        self.iteration = st.iteration;
        self.rng = st.rng.restore();
        self.sync_caches();
        Ok(())
    }

    pub fn checkpoint(&self) -> GeneralCheckpoint {
        GeneralCheckpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg,
            settings: self.settings,
            data_checksum: crate::io::data_checksum(&self.zs),
            chain: self.chain_state(),
            scale_mu_x: self.scale_mu_x.clone(),
            scale_log_delta_x: self.scale_log_delta_x.clone(),
            adapt_steps_mu: self.adapt_steps_mu.clone(),
            adapt_steps_delta: self.adapt_steps_delta.clone(),
            retained: self.retained.clone(),
            diag: self.diag.clone(),
        }
    }

    /// Rebuild a mid-run sampler from a checkpoint; continuing it produces
    /// the same stream of states as the uninterrupted run.
    pub fn resume(data: &[f64], ckpt: &GeneralCheckpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        if crate::io::data_checksum(data) != ckpt.data_checksum {
            return Err(Error::validation("checkpoint was created from a different series"));
        }
        let mut s = GeneralSampler::new(data, &ckpt.config, &ckpt.settings)?;
        s.set_chain_state(&ckpt.chain)?;
        s.scale_mu_x = ckpt.scale_mu_x.clone();
        s.scale_log_delta_x = ckpt.scale_log_delta_x.clone();
        s.adapt_steps_mu = ckpt.adapt_steps_mu.clone();
        s.adapt_steps_delta = ckpt.adapt_steps_delta.clone();
        s.retained = ckpt.retained.clone();
        s.diag = ckpt.diag.clone();
        Ok(s)
    }

    // ----- cache maintenance --------------------------------------------

    fn sync_caches(&mut self) {
        self.log_p = log_stick_weights(&self.zeta);
        for li in 0..self.cfg.truncation {
            self.refresh_logk_column(li);
        }
        self.refresh_occ();
        self.refresh_logd();
    }

    fn refresh_occ(&mut self) {
        self.occ.iter_mut().for_each(|o| *o = 0);
        for &lab in &self.labels {
            self.occ[lab] += 1;
        }
    }

    fn refresh_logk_column(&mut self, l: usize) {
        let c = self.comp[l];
        let lt = self.cfg.truncation;
        for i in 0..self.m {
            self.logk[i * lt + l] = normal_logpdf(self.zs[i], c.mu_x, c.delta_x);
        }
    }

    fn refresh_logd(&mut self) {
        let lt = self.cfg.truncation;
        for i in 0..self.m {
            let row = &self.logk[i * lt..(i + 1) * lt];
            let mut max = f64::NEG_INFINITY;
            for (lp, k) in self.log_p.iter().zip(row) {
                max = max.max(lp + k);
            }
            let mut sum = 0.0;
            for (lp, k) in self.log_p.iter().zip(row) {
                sum += (lp + k - max).exp();
            }
            self.logd[i] = max + sum.ln();
        }
    }

    // ----- sweep ----------------------------------------------------------

    /// One full deterministic-scan sweep in the fixed order: labels, response
    /// parameters, weight-kernel parameters, sticks, precision, psi.
    pub fn sweep(&mut self) {
        self.refresh_logd();
        self.update_labels();
        self.update_mu_y();
        self.update_delta_y();
        self.update_beta();
        self.update_mu_x();
        self.update_delta_x();
        self.update_sticks();
        self.update_alpha();
        self.update_hyperparams();

        self.iteration += 1;
        if self.iteration == self.settings.burn_in + 1 {
            // Post burn-in acceptance is what the tuning targets; keep the
            // burn-in counts on the side.
            self.diag.burnin_accept_mu_x = std::mem::replace(
                &mut self.diag.accept_mu_x,
                vec![AcceptCounter::default(); self.cfg.truncation],
            );
            self.diag.burnin_accept_delta_x = std::mem::replace(
                &mut self.diag.accept_delta_x,
                vec![AcceptCounter::default(); self.cfg.truncation],
            );
        }
        let occupied = self.occupied_components();
        self.diag.max_occupied = self.diag.max_occupied.max(occupied);
        if self.iteration % 100 == 0 || self.iteration == self.settings.n_iterations {
            self.diag.occupancy_trace.push((self.iteration, occupied));
        }
        if self.iteration > self.settings.burn_in
            && (self.iteration - self.settings.burn_in) % self.settings.thin == 0
        {
            self.retained.push(self.snapshot());
        }
    }

    /// Run the remaining sweeps and package the retained draws.
    pub fn run_to_completion(&mut self) -> PosteriorDraws {
        while self.iteration < self.settings.n_iterations {
            self.sweep();
        }
        PosteriorDraws { states: self.retained.clone(), meta: self.meta() }
    }

    pub fn meta(&self) -> DrawsMeta {
        DrawsMeta {
            model: "general".to_string(),
            n: self.zs.len(),
            truncation: self.cfg.truncation,
            seed: self.settings.seed,
            n_iterations: self.settings.n_iterations,
            burn_in: self.settings.burn_in,
            thin: self.settings.thin,
            data_checksum: crate::io::data_checksum(&self.zs),
            data_min: self.zs.iter().copied().fold(f64::INFINITY, f64::min),
            data_max: self.zs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            z_last: *self.zs.last().expect("nonempty series"),
        }
    }

    // ----- individual updates ----------------------------------------------

    /// Draw each configuration label from its discrete full conditional.
    pub fn update_labels(&mut self) {
        let lt = self.cfg.truncation;
        let mut lw = vec![0.0; lt];
        for i in 0..self.m {
            let z_prev = self.zs[i];
            let z = self.zs[i + 1];
            let row = &self.logk[i * lt..(i + 1) * lt];
            let mut max = f64::NEG_INFINITY;
            for (li, c) in self.comp.iter().enumerate() {
                let v = self.log_p[li]
                    + row[li]
                    + normal_logpdf(z, c.response_mean(z_prev), c.delta_y);
                lw[li] = v;
                max = max.max(v);
            }
            debug_assert!(max.is_finite());
            let mut total = 0.0;
            for w in lw.iter_mut() {
                *w = (*w - max).exp();
                total += *w;
            }
            let u: f64 = self.rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = lt - 1;
            for (li, w) in lw.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = li;
                    break;
                }
            }
            self.labels[i] = pick;
        }
        self.refresh_occ();
    }

    /// Conjugate draw of every response location mu_y.
    pub fn update_mu_y(&mut self) {
        let lt = self.cfg.truncation;
        let mut sums = vec![0.0; lt];
        for i in 0..self.m {
            let l = self.labels[i];
            let c = &self.comp[l];
            sums[l] += self.zs[i + 1] + c.beta * (self.zs[i] - c.mu_x);
        }
        for l in 0..lt {
            let draw = if self.occ[l] > 0 {
                let (mean, var) = mu_y_posterior(
                    self.psi.m_y,
                    self.psi.v_y,
                    self.comp[l].delta_y,
                    self.occ[l] as f64,
                    sums[l],
                );
                sample_normal(&mut self.rng, mean, var)
            } else {
                sample_normal(&mut self.rng, self.psi.m_y, self.psi.v_y)
            };
            self.comp[l].mu_y = draw;
        }
    }

    /// Conjugate draw of every response variance delta_y.
    pub fn update_delta_y(&mut self) {
        let lt = self.cfg.truncation;
        let mut rss = vec![0.0; lt];
        for i in 0..self.m {
            let l = self.labels[i];
            let c = &self.comp[l];
            let r = self.zs[i + 1] - c.mu_y + c.beta * (self.zs[i] - c.mu_x);
            rss[l] += r * r;
        }
        for l in 0..lt {
            let (shape, scale) = if self.occ[l] > 0 {
                delta_y_posterior(self.psi.nu_y, self.psi.s_y, self.occ[l] as f64, rss[l])
            } else {
                (self.psi.nu_y, self.psi.s_y)
            };
            self.comp[l].delta_y = sample_inverse_gamma(&mut self.rng, shape, scale);
        }
    }

    /// Conjugate draw of every slope beta.
    pub fn update_beta(&mut self) {
        let lt = self.cfg.truncation;
        let mut sxx = vec![0.0; lt];
        let mut sxy = vec![0.0; lt];
        for i in 0..self.m {
            let l = self.labels[i];
            let c = &self.comp[l];
            let x = self.zs[i] - c.mu_x;
            sxx[l] += x * x;
            sxy[l] += x * (c.mu_y - self.zs[i + 1]);
        }
        for l in 0..lt {
            let draw = if self.occ[l] > 0 {
                let (mean, var) = beta_posterior(
                    self.psi.theta,
                    self.psi.c,
                    self.comp[l].delta_y,
                    sxx[l],
                    sxy[l],
                );
                sample_normal(&mut self.rng, mean, var)
            } else {
                sample_normal(&mut self.rng, self.psi.theta, self.psi.c)
            };
            self.comp[l].beta = draw;
        }
    }

    /// Metropolis update of every weight-kernel location mu_x: random walk
    /// for occupied components, independence proposal from the base
    /// distribution for empty ones.
    pub fn update_mu_x(&mut self) {
        for l in 0..self.cfg.truncation {
            self.update_mu_x_for(l);
        }
    }

    pub fn update_mu_x_for(&mut self, l: usize) {
        let occupied = self.occ[l] > 0;
        let current = self.comp[l].mu_x;
        let candidate = if occupied {
            current + self.scale_mu_x[l] * sample_normal(&mut self.rng, 0.0, 1.0)
        } else {
            sample_normal(&mut self.rng, self.psi.m_x, self.psi.v_x)
        };
        let (log_acc, col, logd_new) = self.mu_x_decision(l, candidate);
        let accepted = self.rng.random::<f64>().ln() < log_acc;
        if accepted {
            self.comp[l].mu_x = candidate;
            self.install_column(l, &col, &logd_new);
        }
        if occupied {
            self.diag.accept_mu_x[l].record(accepted);
            self.adapt(AdaptTarget::MuX, l, accepted);
        }
    }

    /// Metropolis update of every weight-kernel variance delta_x, random
    /// walk on the log scale for occupied components.
    pub fn update_delta_x(&mut self) {
        for l in 0..self.cfg.truncation {
            self.update_delta_x_for(l);
        }
    }

    pub fn update_delta_x_for(&mut self, l: usize) {
        let occupied = self.occ[l] > 0;
        let current = self.comp[l].delta_x;
        let candidate = if occupied {
            (current.ln() + self.scale_log_delta_x[l] * sample_normal(&mut self.rng, 0.0, 1.0))
                .exp()
        } else {
            sample_inverse_gamma(&mut self.rng, self.psi.nu_x, self.psi.s_x)
        };
        if !(candidate > 0.0 && candidate.is_finite()) {
            if occupied {
                self.diag.accept_delta_x[l].record(false);
                self.adapt(AdaptTarget::DeltaX, l, false);
            }
            return;
        }
        let (log_acc, col, logd_new) = self.delta_x_decision(l, candidate);
        let accepted = self.rng.random::<f64>().ln() < log_acc;
        if accepted {
            self.comp[l].delta_x = candidate;
            self.install_column(l, &col, &logd_new);
        }
        if occupied {
            self.diag.accept_delta_x[l].record(accepted);
            self.adapt(AdaptTarget::DeltaX, l, accepted);
        }
    }

    /// Acceptance log-ratio the sampler would use for a mu_x candidate;
    /// exposed so tests can verify the Metropolis targets directly.
    pub fn log_accept_mu_x(&self, l: usize, candidate: f64) -> f64 {
        self.mu_x_decision(l, candidate).0
    }

    /// Acceptance log-ratio for a delta_x candidate (log-scale random walk
    /// Jacobian included when the component is occupied).
    pub fn log_accept_delta_x(&self, l: usize, candidate: f64) -> f64 {
        self.delta_x_decision(l, candidate).0
    }

    fn mu_x_decision(&self, l: usize, candidate: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let c = &self.comp[l];
        let (delta_logd, col, logd_new) = self.weight_denominator_delta(l, candidate, c.delta_x);
        let log_acc = if self.occ[l] > 0 {
            // Collapsed normal form of the prior and both kernel products;
            // the weight-mixture denominator enters through delta_logd.
            let (m_star, v_star) = self.mu_x_normal_form(l);
            normal_logpdf(candidate, m_star, v_star) - normal_logpdf(c.mu_x, m_star, v_star)
                - delta_logd
        } else {
            // Independence proposal from the base distribution: the base
            // density cancels, leaving only the denominator ratio.
            -delta_logd
        };
        (log_acc, col, logd_new)
    }

    fn delta_x_decision(&self, l: usize, candidate: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let c = &self.comp[l];
        let (delta_logd, col, logd_new) = self.weight_denominator_delta(l, c.mu_x, candidate);
        let log_acc = if self.occ[l] > 0 {
            let (shape, scale) = self.delta_x_ig_form(l);
            // Log-scale random walk: the Jacobian contributes ln(delta).
            inverse_gamma_logpdf(candidate, shape, scale) + candidate.ln()
                - inverse_gamma_logpdf(c.delta_x, shape, scale)
                - c.delta_x.ln()
                - delta_logd
        } else {
            -delta_logd
        };
        (log_acc, col, logd_new)
    }

    /// Collapsed N((m^x)*, (v^x)*) carrying every mu_x-dependent factor of
    /// the occupied full conditional except the weight denominator.
    fn mu_x_normal_form(&self, l: usize) -> (f64, f64) {
        let c = &self.comp[l];
        let mut s_prev = 0.0;
        let mut s_resp = 0.0;
        for i in 0..self.m {
            if self.labels[i] == l {
                s_prev += self.zs[i];
                s_resp += self.zs[i + 1] - c.mu_y;
            }
        }
        mu_x_posterior(
            self.psi.m_x,
            self.psi.v_x,
            c.beta,
            c.delta_x,
            c.delta_y,
            self.occ[l] as f64,
            s_prev,
            s_resp,
        )
    }

    /// IG(nu^x + M/2, s^x + rss/2) factor of the occupied delta_x full
    /// conditional.
    fn delta_x_ig_form(&self, l: usize) -> (f64, f64) {
        let c = &self.comp[l];
        let mut rss = 0.0;
        for i in 0..self.m {
            if self.labels[i] == l {
                let d = self.zs[i] - c.mu_x;
                rss += d * d;
            }
        }
        (self.psi.nu_x + 0.5 * self.occ[l] as f64, self.psi.s_x + 0.5 * rss)
    }

    /// Change in sum_i log d(z_i) if component l's weight kernel moved to
    /// (mu_x, delta_x); returns (change, new kernel column, new log d).
    fn weight_denominator_delta(
        &self,
        l: usize,
        mu_x: f64,
        delta_x: f64,
    ) -> (f64, Vec<f64>, Vec<f64>) {
        let lt = self.cfg.truncation;
        let mut col = Vec::with_capacity(self.m);
        let mut logd_new = Vec::with_capacity(self.m);
        let mut delta = 0.0;
        for i in 0..self.m {
            let new_k = normal_logpdf(self.zs[i], mu_x, delta_x);
            let old_term = self.log_p[l] + self.logk[i * lt + l];
            let new_term = self.log_p[l] + new_k;
            let row = &self.logk[i * lt..(i + 1) * lt];
            let updated = log_sum_replace(self.logd[i], old_term, new_term, || {
                let mut others = Vec::with_capacity(lt.saturating_sub(1));
                for (li, k) in row.iter().enumerate() {
                    if li != l {
                        others.push(self.log_p[li] + k);
                    }
                }
                log_sum_exp(&others)
            });
            delta += updated - self.logd[i];
            col.push(new_k);
            logd_new.push(updated);
        }
        (delta, col, logd_new)
    }

    fn install_column(&mut self, l: usize, col: &[f64], logd_new: &[f64]) {
        let lt = self.cfg.truncation;
        for i in 0..self.m {
            self.logk[i * lt + l] = col[i];
        }
        self.logd.copy_from_slice(logd_new);
    }

    /// Slice-sampler update of every stick variable, each via one
    /// truncated-beta draw, followed by a weight refresh.
    pub fn update_sticks(&mut self) {
        if self.cfg.truncation == 1 {
            return;
        }
        let lt = self.cfg.truncation;
        // Kernels scaled per pair so each row's maximum is 1; the slice
        // constraints are invariant to per-row scaling.
        let mut ck = vec![0.0; self.m * lt];
        for i in 0..self.m {
            let row = &self.logk[i * lt..(i + 1) * lt];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (li, k) in row.iter().enumerate() {
                ck[i * lt + li] = (k - max).exp();
            }
        }
        let violations =
            slice_update_sticks(&mut self.zeta, &self.occ, self.alpha, &ck, self.m, &mut self.rng);
        self.diag.slice_violations += violations;
        self.log_p = log_stick_weights(&self.zeta);
        self.refresh_logd();
    }

    /// Conjugate gamma draw of the precision alpha.
    pub fn update_alpha(&mut self) {
        let (shape, rate) = alpha_posterior(self.cfg.a_alpha, self.cfg.b_alpha, &self.zeta);
        self.alpha = sample_gamma(&mut self.rng, shape, rate);
    }

    /// Conjugate draws of all eight psi components; every component (occupied
    /// or empty) enters since all are base-distribution draws.
    pub fn update_hyperparams(&mut self) {
        self.update_m_x();
        self.update_v_x();
        self.update_m_y();
        self.update_v_y();
        self.update_theta();
        self.update_c();
        self.update_s_x();
        self.update_s_y();
    }

    pub fn update_m_x(&mut self) {
        let sum: f64 = self.comp.iter().map(|c| c.mu_x).sum();
        let (mean, var) = normal_normal_posterior(
            self.cfg.a_m_x,
            self.cfg.b_m_x,
            self.psi.v_x,
            self.cfg.truncation as f64,
            sum,
        );
        self.psi.m_x = sample_normal(&mut self.rng, mean, var);
    }

    pub fn update_v_x(&mut self) {
        let ss: f64 = self.comp.iter().map(|c| (c.mu_x - self.psi.m_x).powi(2)).sum();
        self.psi.v_x = sample_inverse_gamma(
            &mut self.rng,
            self.cfg.a_v_x + 0.5 * self.cfg.truncation as f64,
            self.cfg.b_v_x + 0.5 * ss,
        );
    }

    pub fn update_m_y(&mut self) {
        let sum: f64 = self.comp.iter().map(|c| c.mu_y).sum();
        let (mean, var) = normal_normal_posterior(
            self.cfg.a_m_y,
            self.cfg.b_m_y,
            self.psi.v_y,
            self.cfg.truncation as f64,
            sum,
        );
        self.psi.m_y = sample_normal(&mut self.rng, mean, var);
    }

    pub fn update_v_y(&mut self) {
        let ss: f64 = self.comp.iter().map(|c| (c.mu_y - self.psi.m_y).powi(2)).sum();
        self.psi.v_y = sample_inverse_gamma(
            &mut self.rng,
            self.cfg.a_v_y + 0.5 * self.cfg.truncation as f64,
            self.cfg.b_v_y + 0.5 * ss,
        );
    }

    pub fn update_theta(&mut self) {
        let sum: f64 = self.comp.iter().map(|c| c.beta).sum();
        let (mean, var) = normal_normal_posterior(
            self.cfg.a_theta,
            self.cfg.b_theta,
            self.psi.c,
            self.cfg.truncation as f64,
            sum,
        );
        self.psi.theta = sample_normal(&mut self.rng, mean, var);
    }

    pub fn update_c(&mut self) {
        let ss: f64 = self.comp.iter().map(|c| (c.beta - self.psi.theta).powi(2)).sum();
        self.psi.c = sample_inverse_gamma(
            &mut self.rng,
            self.cfg.a_c + 0.5 * self.cfg.truncation as f64,
            self.cfg.b_c + 0.5 * ss,
        );
    }

    pub fn update_s_x(&mut self) {
        let inv_sum: f64 = self.comp.iter().map(|c| 1.0 / c.delta_x).sum();
        self.psi.s_x = sample_gamma(
            &mut self.rng,
            self.cfg.a_s_x + self.cfg.truncation as f64 * self.psi.nu_x,
            self.cfg.b_s_x + inv_sum,
        );
    }

    pub fn update_s_y(&mut self) {
        let inv_sum: f64 = self.comp.iter().map(|c| 1.0 / c.delta_y).sum();
        self.psi.s_y = sample_gamma(
            &mut self.rng,
            self.cfg.a_s_y + self.cfg.truncation as f64 * self.psi.nu_y,
            self.cfg.b_s_y + inv_sum,
        );
    }

    fn adapt(&mut self, target: AdaptTarget, l: usize, accepted: bool) {
        if !self.settings.adapt || self.iteration >= self.settings.burn_in {
            return;
        }
        let (scale, steps) = match target {
            AdaptTarget::MuX => (&mut self.scale_mu_x[l], &mut self.adapt_steps_mu[l]),
            AdaptTarget::DeltaX => {
                (&mut self.scale_log_delta_x[l], &mut self.adapt_steps_delta[l])
            }
        };
        *steps += 1;
        let gamma = (*steps as f64 + 10.0).powf(-0.6);
        let indicator = if accepted { 1.0 } else { 0.0 };
        *scale = (*scale * (gamma * (indicator - RW_TARGET_ACCEPT)).exp()).clamp(1e-10, 1e10);
    }
}

enum AdaptTarget {
    MuX,
    DeltaX,
}

const RW_TARGET_ACCEPT: f64 = 0.3;

/// Convenience wrapper: build, run, and package one chain.
pub fn run(
    data: &[f64],
    cfg: &HyperpriorConfig,
    settings: &SamplerSettings,
) -> Result<(PosteriorDraws, Diagnostics)> {
    let mut s = GeneralSampler::new(data, cfg, settings)?;
    let draws = s.run_to_completion();
    let diag = s.diagnostics().clone();
    Ok((draws, diag))
}

// ----- shared pure pieces -----------------------------------------------

pub(crate) fn validate_series(data: &[f64]) -> Result<()> {
    if data.len() < 3 {
        return Err(Error::validation("need at least 3 observations"));
    }
    if let Some(i) = data.iter().position(|z| !z.is_finite()) {
        return Err(Error::validation(format!("non-finite observation at index {i}")));
    }
    Ok(())
}

/// Posterior (mean, var) of an occupied component's mu_y given the residual
/// sum over its members.
pub fn mu_y_posterior(m_y: f64, v_y: f64, delta_y: f64, count: f64, resid_sum: f64) -> (f64, f64) {
    normal_normal_posterior(m_y, v_y, delta_y, count, resid_sum)
}

/// Posterior (shape, scale) of an occupied component's delta_y.
pub fn delta_y_posterior(nu_y: f64, s_y: f64, count: f64, rss: f64) -> (f64, f64) {
    (nu_y + 0.5 * count, s_y + 0.5 * rss)
}

/// Posterior (mean, var) of an occupied component's beta, where `sxx` is
/// sum (z_prev - mu_x)^2 and `sxy` is sum (z_prev - mu_x)(mu_y - z) over the
/// component's members.
pub fn beta_posterior(theta: f64, c: f64, delta_y: f64, sxx: f64, sxy: f64) -> (f64, f64) {
    let var = 1.0 / (1.0 / c + sxx / delta_y);
    let mean = var * (theta / c + sxy / delta_y);
    (mean, var)
}

/// Collapsed normal ((m^x)*, (v^x)*) for the occupied mu_x target. The
/// precision sums the prior, weight-kernel and response-kernel precisions;
/// the response term is expanded so a zero slope needs no division.
#[allow(clippy::too_many_arguments)]
pub fn mu_x_posterior(
    m_x: f64,
    v_x: f64,
    beta: f64,
    delta_x: f64,
    delta_y: f64,
    count: f64,
    s_prev: f64,
    s_resp: f64,
) -> (f64, f64) {
    let prec = 1.0 / v_x + count / delta_x + count * beta * beta / delta_y;
    let var = 1.0 / prec;
    let mean =
        var * (m_x / v_x + s_prev / delta_x + (beta * beta * s_prev + beta * s_resp) / delta_y);
    (mean, var)
}

/// Posterior (shape, rate) of the precision alpha given the sticks: the
/// gamma prior combines with the stick density, whose only alpha-dependence
/// is alpha^(L-1) p_L^(alpha-1). A degenerate last weight is clamped at the
/// smallest positive normal so the rate stays finite.
pub fn alpha_posterior(a_alpha: f64, b_alpha: f64, zeta: &[f64]) -> (f64, f64) {
    let log_p_last: f64 = zeta.iter().map(|z| z.ln()).sum::<f64>().max(f64::MIN_POSITIVE.ln());
    (a_alpha + zeta.len() as f64, b_alpha - log_p_last)
}

/// One slice-sampler pass over all stick variables.
///
/// `ck` holds per-pair weight-kernel ordinates scaled so every row's maximum
/// is 1 (the constraints are invariant to per-row scaling). For each stick in
/// turn, fresh auxiliary uniforms define per-pair upper bounds on the
/// weight-mixture denominator, which is linear in that stick; the induced
/// interval truncates the beta full conditional and the stick is drawn by
/// inverse CDF. Returns the number of post-draw constraint violations
/// (always 0 unless arithmetic breaks).
pub(crate) fn slice_update_sticks<R: Rng>(
    zeta: &mut [f64],
    occ: &[usize],
    alpha: f64,
    ck: &[f64],
    m: usize,
    rng: &mut R,
) -> u64 {
    let lt = occ.len();
    debug_assert_eq!(zeta.len() + 1, lt);
    let mut violations = 0;
    let mut w1 = vec![0.0; m];
    let mut w0 = vec![0.0; m];
    let mut bound = vec![0.0; m];
    let mut tail_occ = vec![0.0; lt];
    for l in (0..lt - 1).rev() {
        tail_occ[l] = tail_occ[l + 1] + occ[l + 1] as f64;
    }
    for l in 0..lt - 1 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for i in 0..m {
            let row = &ck[i * lt..(i + 1) * lt];
            // Decompose d = zeta_l * w1 + w0 using prefix products of the
            // other sticks.
            let mut pre = 1.0;
            let mut w0i = 0.0;
            for j in 0..l {
                w0i += row[j] * (1.0 - zeta[j]) * pre;
                pre *= zeta[j];
            }
            w0i += row[l] * pre;
            let mut w1i = -row[l] * pre;
            let mut pe = pre;
            for j in l + 1..lt - 1 {
                w1i += row[j] * (1.0 - zeta[j]) * pe;
                pe *= zeta[j];
            }
            w1i += row[lt - 1] * pe;

            let d = zeta[l] * w1i + w0i;
            debug_assert!(d > 0.0, "scaled weight denominator must stay positive");
            let u: f64 = rng.random();
            let b = d / u;
            if w1i > 0.0 {
                hi = hi.min((b - w0i) / w1i);
            } else if w1i < 0.0 {
                lo = lo.max((b - w0i) / w1i);
            }
            w1[i] = w1i;
            w0[i] = w0i;
            bound[i] = b;
        }
        assert!(lo < hi, "admissible stick interval is empty: arithmetic bug");
        let a_param = alpha + tail_occ[l];
        let b_param = occ[l] as f64 + 1.0;
        let draw = sample_truncated_beta(rng, a_param, b_param, lo, hi);
        for i in 0..m {
            let d_new = draw * w1[i] + w0[i];
            if !(d_new <= bound[i] * (1.0 + 1e-9)) {
                violations += 1;
                debug_assert!(false, "slice constraint violated: {d_new} > {}", bound[i]);
            }
        }
        zeta[l] = draw;
    }
    violations
}

fn initial_psi(cfg: &HyperpriorConfig) -> Hyperparams {
    let ig_mean = |a: f64, b: f64| b / (a - 1.0).max(0.5);
    Hyperparams {
        m_x: cfg.a_m_x,
        v_x: ig_mean(cfg.a_v_x, cfg.b_v_x),
        m_y: cfg.a_m_y,
        v_y: ig_mean(cfg.a_v_y, cfg.b_v_y),
        s_x: cfg.a_s_x / cfg.b_s_x,
        s_y: cfg.a_s_y / cfg.b_s_y,
        theta: cfg.a_theta,
        c: ig_mean(cfg.a_c, cfg.b_c),
        nu_x: cfg.nu_x,
        nu_y: cfg.nu_y,
    }
}

/// Partition the lagged pairs into min(5, L) groups with k-means and seed
/// the first components at the group statistics; remaining components start
/// at base-distribution draws. Overdispersed random starts occasionally
/// begin in likelihood underflow, which this avoids.
fn initial_components<R: Rng>(
    data: &[f64],
    lt: usize,
    psi: &Hyperparams,
    rng: &mut R,
) -> (Vec<ComponentParams>, Vec<usize>) {
    let m = data.len() - 1;
    let pairs: Vec<(f64, f64)> = (0..m).map(|i| (data[i], data[i + 1])).collect();
    let k = lt.min(5).max(1);
    let assignment = kmeans_pairs(&pairs, k, 25);

    let floor = 1e-6 * variance(data).max(1e-12);
    let mut comp = Vec::with_capacity(lt);
    for g in 0..k {
        let members: Vec<(f64, f64)> = pairs
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == g)
            .map(|(p, _)| *p)
            .collect();
        if members.is_empty() {
            comp.push(HyperpriorConfig::sample_component(psi, rng));
            continue;
        }
        let nm = members.len() as f64;
        let mx = members.iter().map(|p| p.0).sum::<f64>() / nm;
        let my = members.iter().map(|p| p.1).sum::<f64>() / nm;
        let vx = members.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / nm;
        let vy = members.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / nm;
        comp.push(ComponentParams {
            mu_x: mx,
            mu_y: my,
            beta: 0.0,
            delta_x: vx.max(floor),
            delta_y: vy.max(floor),
        });
    }
    while comp.len() < lt {
        comp.push(HyperpriorConfig::sample_component(psi, rng));
    }
    (comp, assignment)
}

fn kmeans_pairs(pairs: &[(f64, f64)], k: usize, iters: usize) -> Vec<usize> {
    let m = pairs.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pairs[a].0.partial_cmp(&pairs[b].0).unwrap());
    // Seeds spread along the sorted first coordinate.
    let mut centers: Vec<(f64, f64)> = (0..k)
        .map(|j| pairs[order[j * (m - 1) / (k - 1).max(1)]])
        .collect();
    let mut assignment = vec![0usize; m];
    for _ in 0..iters {
        for (i, p) in pairs.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assignment[i] = best;
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut cnt = 0.0;
            for (p, &a) in pairs.iter().zip(&assignment) {
                if a == j {
                    sx += p.0;
                    sy += p.1;
                    cnt += 1.0;
                }
            }
            if cnt > 0.0 {
                *c = (sx / cnt, sy / cnt);
            }
        }
    }
    assignment
}
