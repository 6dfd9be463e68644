//! Restricted mixture whose bivariate kernel shares one location and one
//! scale between the weight and response roles, with slopes confined to
//! (-1, 1). The restriction makes the weighted mixture of component
//! marginals an invariant density of the transition kernel, so the chain
//! has a stationary distribution.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{DrawsMeta, PosteriorDraws};
use crate::model::{
    log_stick_weights, ComponentParams, Hyperparams, MixtureState, StickVector, TransitionModel,
};
use crate::sampler::{
    alpha_posterior, kmeans_pairs, slice_update_sticks, validate_series, AcceptCounter,
    HyperpriorConfig, RngState, SamplerSettings, CHECKPOINT_VERSION,
};
use crate::stats::{
    inverse_gamma_logpdf, log_sum_exp, log_sum_replace, normal_cdf, normal_logpdf,
    normal_normal_posterior, sample_beta, sample_gamma, sample_inverse_gamma, sample_normal,
    variance,
};

/// One restricted component: shared location, shared scale, and a slope in
/// (-1, 1). The response kernel is N(mu - beta (z_prev - mu),
/// sigma2 (1 - beta^2)) and the weight kernel is N(z_prev | mu, sigma2).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryComponent {
    pub mu: f64,
    pub sigma2: f64,
    pub beta: f64,
}

impl StationaryComponent {
    pub fn new(mu: f64, sigma2: f64, beta: f64) -> Result<Self> {
        let c = StationaryComponent { mu, sigma2, beta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite() && self.mu.is_finite()) {
            return Err(Error::domain("component scale must be positive and location finite"));
        }
        if !(self.beta > -1.0 && self.beta < 1.0) {
            return Err(Error::domain("stationary slope must lie strictly in (-1, 1)"));
        }
        Ok(())
    }

    pub fn response_mean(&self, z_prev: f64) -> f64 {
        self.mu - self.beta * (z_prev - self.mu)
    }

    pub fn response_var(&self) -> f64 {
        self.sigma2 * (1.0 - self.beta * self.beta)
    }
}

/// Hyperparameters of the restricted base distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryHyperparams {
    pub m: f64,
    pub v: f64,
    pub s: f64,
    pub theta: f64,
    pub c: f64,
    pub nu: f64,
}

/// One posterior draw of the restricted mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryState {
    pub components: Vec<StationaryComponent>,
    pub sticks: StickVector,
    pub alpha: f64,
    pub psi: StationaryHyperparams,
}

impl StationaryState {
    pub fn truncation(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.len() != self.sticks.truncation() {
            return Err(Error::domain("component count must equal stick truncation level"));
        }
        for c in &self.components {
            c.validate()?;
        }
        if !(self.alpha > 0.0) {
            return Err(Error::domain("alpha must be positive"));
        }
        Ok(())
    }

    /// The invariant density sum_l p_l N(mu_l, sigma2_l).
    pub fn invariant_density(&self, z: f64) -> f64 {
        let logp = self.sticks.log_weights();
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(logp)
            .map(|(c, lp)| lp + normal_logpdf(z, c.mu, c.sigma2))
            .collect();
        log_sum_exp(&terms).exp()
    }

    /// Embed into the general parametrization: (mu, mu, beta, sigma2,
    /// sigma2 (1 - beta^2)) reproduces the same transition density exactly.
    pub fn embed(&self) -> MixtureState {
        MixtureState {
            components: self
                .components
                .iter()
                .map(|c| ComponentParams {
                    mu_x: c.mu,
                    mu_y: c.mu,
                    beta: c.beta,
                    delta_x: c.sigma2,
                    delta_y: c.response_var(),
                })
                .collect(),
            sticks: self.sticks.clone(),
            alpha: self.alpha,
            psi: Hyperparams {
                m_x: self.psi.m,
                v_x: self.psi.v,
                m_y: self.psi.m,
                v_y: self.psi.v,
                s_x: self.psi.s,
                s_y: self.psi.s,
                theta: self.psi.theta,
                c: self.psi.c,
                nu_x: self.psi.nu,
                nu_y: self.psi.nu,
            },
        }
    }

    fn unnormalized_log_weights(&self, z_prev: f64) -> Vec<f64> {
        let logp = self.sticks.log_weights();
        self.components
            .iter()
            .zip(logp)
            .map(|(c, lp)| lp + normal_logpdf(z_prev, c.mu, c.sigma2))
            .collect()
    }
}

impl TransitionModel for StationaryState {
    fn log_transition_density(&self, z: f64, z_prev: f64) -> f64 {
        let lw = self.unnormalized_log_weights(z_prev);
        let norm = log_sum_exp(&lw);
        assert!(norm.is_finite());
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&lw)
            .map(|(c, w)| w + normal_logpdf(z, c.response_mean(z_prev), c.response_var()))
            .collect();
        log_sum_exp(&terms) - norm
    }

    fn conditional_expectation(&self, z_prev: f64) -> f64 {
        let lw = self.unnormalized_log_weights(z_prev);
        let norm = log_sum_exp(&lw);
        self.components
            .iter()
            .zip(&lw)
            .map(|(c, w)| (w - norm).exp() * c.response_mean(z_prev))
            .sum()
    }

    fn sample_transition<R: Rng>(&self, z_prev: f64, rng: &mut R) -> f64 {
        let lw = self.unnormalized_log_weights(z_prev);
        let norm = log_sum_exp(&lw);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (l, w) in lw.iter().enumerate() {
            acc += (w - norm).exp();
            if u < acc {
                pick = l;
                break;
            }
        }
        let c = &self.components[pick];
        sample_normal(rng, c.response_mean(z_prev), c.response_var())
    }
}

/// Transition density of the restricted mixture.
pub fn stationary_transition_density(z: f64, z_prev: f64, state: &StationaryState) -> f64 {
    state.transition_density(z, z_prev)
}

/// Prior constants of the restricted model, merged from the general
/// configuration's weight-kernel branch (the two roles share symbols here).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryConfig {
    pub a_m: f64,
    pub b_m: f64,
    pub a_v: f64,
    pub b_v: f64,
    pub a_s: f64,
    pub b_s: f64,
    pub a_theta: f64,
    pub b_theta: f64,
    pub a_c: f64,
    pub b_c: f64,
    pub nu: f64,
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub truncation: usize,
}

impl StationaryConfig {
    pub fn from_general(cfg: &HyperpriorConfig) -> Self {
        StationaryConfig {
            a_m: cfg.a_m_x,
            b_m: cfg.b_m_x,
            a_v: cfg.a_v_x,
            b_v: cfg.b_v_x,
            a_s: cfg.a_s_x,
            b_s: cfg.b_s_x,
            a_theta: cfg.a_theta,
            b_theta: cfg.b_theta,
            a_c: cfg.a_c,
            b_c: cfg.b_c,
            nu: cfg.nu_x,
            a_alpha: cfg.a_alpha,
            b_alpha: cfg.b_alpha,
            truncation: cfg.truncation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            self.b_m, self.a_v, self.b_v, self.a_s, self.b_s, self.b_theta, self.a_c, self.b_c,
            self.nu, self.a_alpha, self.b_alpha,
        ];
        if positives.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::validation("prior constants must be positive and finite"));
        }
        if self.a_c <= 1.0 {
            return Err(Error::validation("a_c must exceed 1"));
        }
        if self.truncation < 1 {
            return Err(Error::validation("truncation level must be at least 1"));
        }
        Ok(())
    }

    fn sample_component<R: Rng>(&self, psi: &StationaryHyperparams, rng: &mut R) -> StationaryComponent {
        StationaryComponent {
            mu: sample_normal(rng, psi.m, psi.v),
            sigma2: sample_inverse_gamma(rng, psi.nu, psi.s),
            beta: sample_truncated_slope(rng, psi.theta, psi.c),
        }
    }
}

/// Mass the untruncated slope prior puts on (-1, 1).
fn slope_truncation_mass(theta: f64, c: f64) -> f64 {
    let sd = c.sqrt();
    (normal_cdf((1.0 - theta) / sd) - normal_cdf((-1.0 - theta) / sd)).max(1e-300)
}

/// Rejection draw from N(theta, c) restricted to (-1, 1).
fn sample_truncated_slope<R: Rng>(rng: &mut R, theta: f64, c: f64) -> f64 {
    for _ in 0..10_000 {
        let b = sample_normal(rng, theta, c);
        if b > -1.0 && b < 1.0 {
            return b;
        }
    }
    // Pathological hyperparameters; clamp near the closer boundary.
    theta.clamp(-1.0 + 1e-6, 1.0 - 1e-6)
}

/// Chain state snapshot for checkpointing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryChainState {
    pub state: StationaryState,
    pub labels: Vec<usize>,
    pub iteration: u64,
    pub rng: RngState,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StationaryDiagnostics {
    pub accept_mu: Vec<AcceptCounter>,
    pub accept_sigma2: Vec<AcceptCounter>,
    pub accept_beta: Vec<AcceptCounter>,
    pub slice_violations: u64,
    pub max_occupied: usize,
    pub occupancy_trace: Vec<(u64, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryCheckpoint {
    pub version: u32,
    pub config: StationaryConfig,
    pub settings: SamplerSettings,
    pub data_checksum: u64,
    pub chain: StationaryChainState,
    pub scale_mu: Vec<f64>,
    pub scale_log_sigma2: Vec<f64>,
    pub scale_beta: Vec<f64>,
    pub adapt_steps: Vec<u64>,
    pub retained: Vec<StationaryState>,
    pub diag: StationaryDiagnostics,
}

/// Thinned posterior draws of the restricted mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryDraws {
    pub states: Vec<StationaryState>,
    pub meta: DrawsMeta,
}

impl StationaryDraws {
    /// Embedded copies suitable for any machinery expecting the general
    /// parametrization.
    pub fn embedded(&self) -> PosteriorDraws {
        PosteriorDraws {
            states: self.states.iter().map(StationaryState::embed).collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Gibbs/Metropolis sampler for the restricted mixture. The sweep mirrors
/// the general sampler with the shared-parameter updates replaced by
/// Metropolis steps (the restriction removes their conjugacy).
pub struct StationarySampler {
    zs: Vec<f64>,
    m: usize,
    cfg: StationaryConfig,
    settings: SamplerSettings,

    comp: Vec<StationaryComponent>,
    zeta: Vec<f64>,
    alpha: f64,
    psi: StationaryHyperparams,
    labels: Vec<usize>,
    iteration: u64,
    rng: ChaCha8Rng,

    occ: Vec<usize>,
    log_p: Vec<f64>,
    logk: Vec<f64>,
    logd: Vec<f64>,

    scale_mu: Vec<f64>,
    scale_log_sigma2: Vec<f64>,
    scale_beta: Vec<f64>,
    adapt_steps: Vec<u64>,

    retained: Vec<StationaryState>,
    diag: StationaryDiagnostics,
}

impl StationarySampler {
    pub fn new(data: &[f64], cfg: &StationaryConfig, settings: &SamplerSettings) -> Result<Self> {
        cfg.validate()?;
        settings.validate()?;
        validate_series(data)?;
        let lt = cfg.truncation;
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);

        let psi = StationaryHyperparams {
            m: cfg.a_m,
            v: cfg.b_v / (cfg.a_v - 1.0).max(0.5),
            s: cfg.a_s / cfg.b_s,
            theta: cfg.a_theta,
            c: cfg.b_c / (cfg.a_c - 1.0).max(0.5),
            nu: cfg.nu,
        };
        let alpha0 = cfg.a_alpha / cfg.b_alpha;
        let zeta = vec![(alpha0 / (alpha0 + 1.0)).clamp(1e-6, 1.0 - 1e-6); lt.saturating_sub(1)];

        let m = data.len() - 1;
        let pairs: Vec<(f64, f64)> = (0..m).map(|i| (data[i], data[i + 1])).collect();
        let k = lt.min(5).max(1);
        let labels = kmeans_pairs(&pairs, k, 25);
        let floor = 1e-6 * variance(data).max(1e-12);
        let mut comp = Vec::with_capacity(lt);
        for g in 0..k {
            let vals: Vec<f64> = pairs
                .iter()
                .zip(&labels)
                .filter(|(_, &a)| a == g)
                .flat_map(|(p, _)| [p.0, p.1])
                .collect();
            if vals.is_empty() {
                comp.push(cfg.sample_component(&psi, &mut rng));
                continue;
            }
            let mu = crate::stats::mean(&vals);
            let s2 = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            comp.push(StationaryComponent { mu, sigma2: s2.max(floor), beta: 0.0 });
        }
        while comp.len() < lt {
            comp.push(cfg.sample_component(&psi, &mut rng));
        }

        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale_mu = settings.rw_scale_mu_x.unwrap_or((0.1 * (hi - lo) / 4.0).max(1e-3));
        let scale_ls = settings.rw_scale_log_delta_x.unwrap_or(0.4);

        let mut s = StationarySampler {
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
            occ: vec![0; lt],
            log_p: vec![0.0; lt],
            logk: vec![0.0; m * lt],
            logd: vec![0.0; m],
            scale_mu: vec![scale_mu; lt],
            scale_log_sigma2: vec![scale_ls; lt],
            scale_beta: vec![0.2; lt],
            adapt_steps: vec![0; lt],
            retained: Vec::new(),
            diag: StationaryDiagnostics {
                accept_mu: vec![AcceptCounter::default(); lt],
                accept_sigma2: vec![AcceptCounter::default(); lt],
                accept_beta: vec![AcceptCounter::default(); lt],
                ..StationaryDiagnostics::default()
            },
        };
        s.sync_caches();
        let ll: f64 = (0..s.m)
            .map(|i| s.snapshot().log_transition_density(s.zs[i + 1], s.zs[i]))
            .sum();
        if !ll.is_finite() {
            return Err(Error::numerical("initial state has non-finite log likelihood"));
        }
        Ok(s)
    }

    pub fn snapshot(&self) -> StationaryState {
        StationaryState {
            components: self.comp.clone(),
            sticks: StickVector::new(self.zeta.clone()).expect("sticks stay in (0,1)"),
            alpha: self.alpha,
            psi: self.psi,
        }
    }

    pub fn diagnostics(&self) -> &StationaryDiagnostics {
        &self.diag
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn chain_state(&self) -> StationaryChainState {
        StationaryChainState {
            state: self.snapshot(),
            labels: self.labels.clone(),
            iteration: self.iteration,
            rng: RngState::capture(self.settings.seed, &self.rng),
        }
    }

    pub fn set_chain_state(&mut self, st: &StationaryChainState) -> Result<()> {
        st.state.validate()?;
        if st.state.truncation() != self.cfg.truncation || st.labels.len() != self.m {
            return Err(Error::validation("chain state does not match configuration"));
        }
        self.comp = st.state.components.clone();
        self.zeta = st.state.sticks.zeta().to_vec();
        self.alpha = st.state.alpha;
        self.psi = st.state.psi;
        self.labels = st.labels.clone();
        self.iteration = st.iteration;
        self.rng = st.rng.restore();
        self.sync_caches();
        Ok(())
    }

    pub fn checkpoint(&self) -> StationaryCheckpoint {
        StationaryCheckpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg,
            settings: self.settings,
            data_checksum: crate::io::data_checksum(&self.zs),
            chain: self.chain_state(),
            scale_mu: self.scale_mu.clone(),
            scale_log_sigma2: self.scale_log_sigma2.clone(),
            scale_beta: self.scale_beta.clone(),
            adapt_steps: self.adapt_steps.clone(),
            retained: self.retained.clone(),
            diag: self.diag.clone(),
        }
    }

    pub fn resume(data: &[f64], ckpt: &StationaryCheckpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::validation("unsupported checkpoint version"));
        }
        if crate::io::data_checksum(data) != ckpt.data_checksum {
            return Err(Error::validation("checkpoint was created from a different series"));
        }
        let mut s = StationarySampler::new(data, &ckpt.config, &ckpt.settings)?;
        s.set_chain_state(&ckpt.chain)?;
        s.scale_mu = ckpt.scale_mu.clone();
        s.scale_log_sigma2 = ckpt.scale_log_sigma2.clone();
        s.scale_beta = ckpt.scale_beta.clone();
        s.adapt_steps = ckpt.adapt_steps.clone();
        s.retained = ckpt.retained.clone();
        s.diag = ckpt.diag.clone();
        Ok(s)
    }

    fn sync_caches(&mut self) {
        self.log_p = log_stick_weights(&self.zeta);
        for l in 0..self.cfg.truncation {
            self.refresh_logk_column(l);
        }
        self.occ.iter_mut().for_each(|o| *o = 0);
        for &lab in &self.labels {
            self.occ[lab] += 1;
        }
        self.refresh_logd();
    }

    fn refresh_logk_column(&mut self, l: usize) {
        let c = self.comp[l];
        let lt = self.cfg.truncation;
        for i in 0..self.m {
            self.logk[i * lt + l] = normal_logpdf(self.zs[i], c.mu, c.sigma2);
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

    pub fn sweep(&mut self) {
        self.refresh_logd();
        self.update_labels();
        self.update_mu();
        self.update_sigma2();
        self.update_beta();
        self.update_sticks();
        self.update_alpha();
        self.update_hyperparams();

        self.iteration += 1;
        let occupied = self.occ.iter().filter(|&&c| c > 0).count();
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

    pub fn run_to_completion(&mut self) -> StationaryDraws {
        while self.iteration < self.settings.n_iterations {
            self.sweep();
        }
        StationaryDraws { states: self.retained.clone(), meta: self.meta() }
    }

    fn meta(&self) -> DrawsMeta {
        DrawsMeta {
            model: "stationary".to_string(),
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
                    + normal_logpdf(z, c.response_mean(z_prev), c.response_var());
                lw[li] = v;
                max = max.max(v);
            }
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
        self.occ.iter_mut().for_each(|o| *o = 0);
        for &lab in &self.labels {
            self.occ[lab] += 1;
        }
    }

    /// Log of the member-likelihood product for component l at the given
    /// parameter values (both kernel roles).
    fn member_loglik(&self, l: usize, mu: f64, sigma2: f64, beta: f64) -> f64 {
        let resp_var = sigma2 * (1.0 - beta * beta);
        let mut acc = 0.0;
        for i in 0..self.m {
            if self.labels[i] == l {
                acc += normal_logpdf(self.zs[i + 1], mu - beta * (self.zs[i] - mu), resp_var)
                    + normal_logpdf(self.zs[i], mu, sigma2);
            }
        }
        acc
    }

    fn weight_denominator_delta(&self, l: usize, mu: f64, sigma2: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let lt = self.cfg.truncation;
        let mut col = Vec::with_capacity(self.m);
        let mut logd_new = Vec::with_capacity(self.m);
        let mut delta = 0.0;
        for i in 0..self.m {
            let new_k = normal_logpdf(self.zs[i], mu, sigma2);
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

    pub fn update_mu(&mut self) {
        for l in 0..self.cfg.truncation {
            self.update_mu_for(l);
        }
    }

    pub fn update_mu_for(&mut self, l: usize) {
        let occupied = self.occ[l] > 0;
        let c = self.comp[l];
        let candidate = if occupied {
            c.mu + self.scale_mu[l] * sample_normal(&mut self.rng, 0.0, 1.0)
        } else {
            sample_normal(&mut self.rng, self.psi.m, self.psi.v)
        };
        let (delta_logd, col, logd_new) = self.weight_denominator_delta(l, candidate, c.sigma2);
        let log_acc = if occupied {
            normal_logpdf(candidate, self.psi.m, self.psi.v)
                - normal_logpdf(c.mu, self.psi.m, self.psi.v)
                + self.member_loglik(l, candidate, c.sigma2, c.beta)
                - self.member_loglik(l, c.mu, c.sigma2, c.beta)
                - delta_logd
        } else {
            -delta_logd
        };
        let accepted = self.rng.random::<f64>().ln() < log_acc;
        if accepted {
            self.comp[l].mu = candidate;
            self.install_column(l, &col, &logd_new);
        }
        if occupied {
            self.diag.accept_mu[l].record(accepted);
            self.adapt_scale(ScaleKind::Mu, l, accepted);
        }
    }

    pub fn update_sigma2(&mut self) {
        for l in 0..self.cfg.truncation {
            self.update_sigma2_for(l);
        }
    }

    pub fn update_sigma2_for(&mut self, l: usize) {
        let occupied = self.occ[l] > 0;
        let c = self.comp[l];
        let candidate = if occupied {
            (c.sigma2.ln() + self.scale_log_sigma2[l] * sample_normal(&mut self.rng, 0.0, 1.0))
                .exp()
        } else {
            sample_inverse_gamma(&mut self.rng, self.psi.nu, self.psi.s)
        };
        if !(candidate > 0.0 && candidate.is_finite()) {
            if occupied {
                self.diag.accept_sigma2[l].record(false);
                self.adapt_scale(ScaleKind::Sigma, l, false);
            }
            return;
        }
        let (delta_logd, col, logd_new) = self.weight_denominator_delta(l, c.mu, candidate);
        let log_acc = if occupied {
            inverse_gamma_logpdf(candidate, self.psi.nu, self.psi.s) + candidate.ln()
                - inverse_gamma_logpdf(c.sigma2, self.psi.nu, self.psi.s)
                - c.sigma2.ln()
                + self.member_loglik(l, c.mu, candidate, c.beta)
                - self.member_loglik(l, c.mu, c.sigma2, c.beta)
                - delta_logd
        } else {
            -delta_logd
        };
        let accepted = self.rng.random::<f64>().ln() < log_acc;
        if accepted {
            self.comp[l].sigma2 = candidate;
            self.install_column(l, &col, &logd_new);
        }
        if occupied {
            self.diag.accept_sigma2[l].record(accepted);
            self.adapt_scale(ScaleKind::Sigma, l, accepted);
        }
    }

    pub fn update_beta(&mut self) {
        for l in 0..self.cfg.truncation {
            self.update_beta_for(l);
        }
    }

    pub fn update_beta_for(&mut self, l: usize) {
        let occupied = self.occ[l] > 0;
        let c = self.comp[l];
        if !occupied {
            // Target equals the proposal (truncated prior); always accept.
            self.comp[l].beta = sample_truncated_slope(&mut self.rng, self.psi.theta, self.psi.c);
            return;
        }
        let candidate = c.beta + self.scale_beta[l] * sample_normal(&mut self.rng, 0.0, 1.0);
        let accepted = if candidate <= -1.0 || candidate >= 1.0 {
            false
        } else {
            // The slope stays out of the weight kernels, so no denominator
            // term; the truncation constant is beta-free and cancels.
            let log_acc = normal_logpdf(candidate, self.psi.theta, self.psi.c)
                - normal_logpdf(c.beta, self.psi.theta, self.psi.c)
                + self.member_loglik(l, c.mu, c.sigma2, candidate)
                - self.member_loglik(l, c.mu, c.sigma2, c.beta);
            self.rng.random::<f64>().ln() < log_acc
        };
        if accepted {
            self.comp[l].beta = candidate;
        }
        self.diag.accept_beta[l].record(accepted);
        self.adapt_scale(ScaleKind::Beta, l, accepted);
    }

    pub fn update_sticks(&mut self) {
        if self.cfg.truncation == 1 {
            return;
        }
        let lt = self.cfg.truncation;
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

    pub fn update_alpha(&mut self) {
        let (shape, rate) = alpha_posterior(self.cfg.a_alpha, self.cfg.b_alpha, &self.zeta);
        self.alpha = sample_gamma(&mut self.rng, shape, rate);
    }

    /// Conjugate draws for (m, v, s); independence-Metropolis draws for
    /// (theta, c) whose conjugate forms are exact up to the slope-truncation
    /// mass, which supplies the acceptance ratio.
    pub fn update_hyperparams(&mut self) {
        let lt = self.cfg.truncation as f64;

        let sum_mu: f64 = self.comp.iter().map(|c| c.mu).sum();
        let (mean, var) =
            normal_normal_posterior(self.cfg.a_m, self.cfg.b_m, self.psi.v, lt, sum_mu);
        self.psi.m = sample_normal(&mut self.rng, mean, var);

        let ss_mu: f64 = self.comp.iter().map(|c| (c.mu - self.psi.m).powi(2)).sum();
        self.psi.v = sample_inverse_gamma(
            &mut self.rng,
            self.cfg.a_v + 0.5 * lt,
            self.cfg.b_v + 0.5 * ss_mu,
        );

        let inv_sum: f64 = self.comp.iter().map(|c| 1.0 / c.sigma2).sum();
        self.psi.s = sample_gamma(
            &mut self.rng,
            self.cfg.a_s + lt * self.psi.nu,
            self.cfg.b_s + inv_sum,
        );

        let sum_beta: f64 = self.comp.iter().map(|c| c.beta).sum();
        let (t_mean, t_var) =
            normal_normal_posterior(self.cfg.a_theta, self.cfg.b_theta, self.psi.c, lt, sum_beta);
        let theta_prop = sample_normal(&mut self.rng, t_mean, t_var);
        let log_acc = lt
            * (slope_truncation_mass(self.psi.theta, self.psi.c).ln()
                - slope_truncation_mass(theta_prop, self.psi.c).ln());
        if self.rng.random::<f64>().ln() < log_acc {
            self.psi.theta = theta_prop;
        }

        let ss_beta: f64 = self.comp.iter().map(|c| (c.beta - self.psi.theta).powi(2)).sum();
        let c_prop = sample_inverse_gamma(
            &mut self.rng,
            self.cfg.a_c + 0.5 * lt,
            self.cfg.b_c + 0.5 * ss_beta,
        );
        let log_acc = lt
            * (slope_truncation_mass(self.psi.theta, self.psi.c).ln()
                - slope_truncation_mass(self.psi.theta, c_prop).ln());
        if self.rng.random::<f64>().ln() < log_acc {
            self.psi.c = c_prop;
        }
    }

    fn adapt_scale(&mut self, kind: ScaleKind, l: usize, accepted: bool) {
        if !self.settings.adapt || self.iteration >= self.settings.burn_in {
            return;
        }
        self.adapt_steps[l] += 1;
        let gamma = (self.adapt_steps[l] as f64 + 10.0).powf(-0.6);
        let step = (gamma * (if accepted { 1.0 } else { 0.0 } - 0.3)).exp();
        let scale = match kind {
            ScaleKind::Mu => &mut self.scale_mu[l],
            ScaleKind::Sigma => &mut self.scale_log_sigma2[l],
            ScaleKind::Beta => &mut self.scale_beta[l],
        };
        *scale = (*scale * step).clamp(1e-10, 1e10);
    }
}

enum ScaleKind {
    Mu,
    Sigma,
    Beta,
}

/// Fit the restricted mixture.
pub fn fit_stationary(
    data: &[f64],
    cfg: &StationaryConfig,
    settings: &SamplerSettings,
) -> Result<(StationaryDraws, StationaryDiagnostics)> {
    let mut s = StationarySampler::new(data, cfg, settings)?;
    let draws = s.run_to_completion();
    let diag = s.diagnostics().clone();
    Ok((draws, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{linspace, trapezoid};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn filler_psi() -> StationaryHyperparams {
        StationaryHyperparams { m: 0.0, v: 1.0, s: 1.0, theta: 0.0, c: 0.5, nu: 2.0 }
    }

    fn random_restricted(r: &mut ChaCha8Rng, lt: usize) -> StationaryState {
        let components = (0..lt)
            .map(|_| StationaryComponent {
                mu: r.random_range(-3.0..3.0),
                sigma2: r.random_range(0.3..2.5),
                beta: r.random_range(-0.9..0.9),
            })
            .collect();
        let zeta = (0..lt - 1).map(|_| r.random_range(0.1..0.9)).collect();
        StationaryState {
            components,
            sticks: StickVector::new(zeta).unwrap(),
            alpha: 1.0,
            psi: filler_psi(),
        }
    }

    #[test]
    fn rejects_nonstationary_slope() {
        assert!(StationaryComponent::new(0.0, 1.0, 1.0).is_err());
        assert!(StationaryComponent::new(0.0, 1.0, -1.2).is_err());
        assert!(StationaryComponent::new(0.0, 1.0, 0.99).is_ok());
    }

    #[test]
    fn single_component_is_gaussian_ar1() {
        let st = StationaryState {
            components: vec![StationaryComponent::new(1.0, 2.0, 0.5).unwrap()],
            sticks: StickVector::new(vec![]).unwrap(),
            alpha: 1.0,
            psi: filler_psi(),
        };
        let z_prev = 2.5;
        let expect = crate::stats::normal_pdf(0.7, 1.0 - 0.5 * (z_prev - 1.0), 2.0 * 0.75);
        assert!((stationary_transition_density(0.7, z_prev, &st) - expect).abs() < 1e-14);
        // Invariance: integrating the kernel against N(mu, sigma2)
        // reproduces N(mu, sigma2).
        let grid = linspace(-14.0, 16.0, 1 << 13);
        for y in [-0.5, 1.0, 3.2] {
            let vals: Vec<f64> = grid
                .iter()
                .map(|&x| st.transition_density(y, x) * st.invariant_density(x))
                .collect();
            let lhs = trapezoid(&grid, &vals);
            assert!((lhs - st.invariant_density(y)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_slope_gives_static_mixture_kernel() {
        let mut r = rng(4);
        let mut st = random_restricted(&mut r, 3);
        for c in &mut st.components {
            c.beta = 0.0;
        }
        // Response kernel reduces to the component marginal.
        let q = st.embed().transition_weights(0.4);
        let by_hand: f64 = st
            .components
            .iter()
            .zip(&q)
            .map(|(c, w)| w * crate::stats::normal_pdf(1.1, c.mu, c.sigma2))
            .sum();
        assert!((st.transition_density(1.1, 0.4) - by_hand).abs() < 1e-12);
    }

    #[test]
    fn invariance_identity_under_quadrature() {
        let mut r = rng(8);
        for trial in 0..5 {
            let st = random_restricted(&mut r, 3);
            let grid = linspace(-25.0, 25.0, 1 << 13);
            let marginal: Vec<f64> = grid.iter().map(|&x| st.invariant_density(x)).collect();
            for k in 0..20 {
                let y = -4.0 + 8.0 * k as f64 / 19.0;
                let vals: Vec<f64> = grid
                    .iter()
                    .zip(&marginal)
                    .map(|(&x, &fx)| st.transition_density(y, x) * fx)
                    .collect();
                let lhs = trapezoid(&grid, &vals);
                let rhs = st.invariant_density(y);
                assert!(
                    (lhs - rhs).abs() < 1e-4,
                    "trial {trial}, y {y}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn embedding_reproduces_transition_density() {
        let mut r = rng(15);
        for _ in 0..200 {
            let st = random_restricted(&mut r, 4);
            let emb = st.embed();
            let z_prev = r.random_range(-4.0..4.0);
            let z = r.random_range(-4.0..4.0);
            let a = st.transition_density(z, z_prev);
            let b = emb.transition_density(z, z_prev);
            assert!((a - b).abs() <= 1e-12 * a.max(1e-300), "{a} vs {b}");
        }
    }

    #[test]
    fn fitted_draws_respect_slope_restriction() {
        let data = crate::simulate::simulate_brownian(60, 3).unwrap();
        let proxy = crate::prior::DataProxy::from_series(&data).unwrap();
        let general = crate::prior::default_priors(proxy, None).unwrap();
        let cfg = StationaryConfig {
            truncation: 8,
            ..StationaryConfig::from_general(&general)
        };
        let settings = SamplerSettings {
            n_iterations: 400,
            burn_in: 100,
            thin: 3,
            seed: 7,
            ..SamplerSettings::default()
        };
        let (draws, diag) = fit_stationary(&data, &cfg, &settings).unwrap();
        assert_eq!(draws.states.len(), 100);
        assert_eq!(diag.slice_violations, 0);
        for st in &draws.states {
            for c in &st.components {
                assert!(c.beta.abs() < 1.0);
            }
        }
    }

    #[test]
    fn zero_slope_chain_marginal_matches_invariant_density() {
        let mut r = rng(21);
        let mut st = random_restricted(&mut r, 3);
        for c in &mut st.components {
            c.beta = 0.0;
        }
        let series = crate::simulate::simulate_from_model(&st, 0.0, 200_000, 33).unwrap();
        let thinned: Vec<f64> = series.iter().copied().skip(100).step_by(10).collect();
        let mut sorted = thinned.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // CDF of the invariant mixture via normal CDFs.
        let weights = st.sticks.weights();
        let cdf = |x: f64| -> f64 {
            st.components
                .iter()
                .zip(&weights)
                .map(|(c, w)| w * crate::stats::normal_cdf((x - c.mu) / c.sigma2.sqrt()))
                .sum()
        };
        let nf = sorted.len() as f64;
        let ks = sorted
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / nf - cdf(x)).abs())
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "ks = {ks}");
    }

    #[test]
    fn beta_update_matches_grid_oracle() {
        // Tiny instance, everything frozen except one slope; the Metropolis
        // chain's marginal must match the grid-normalized full conditional
        // (prior x response likelihood, variance included).
        let data = [0.3, -0.5, 0.9];
        let cfg = StationaryConfig {
            a_m: 0.0,
            b_m: 4.0,
            a_v: 2.0,
            b_v: 1.0,
            a_s: 2.0,
            b_s: 2.0,
            a_theta: 0.1,
            b_theta: 0.5,
            a_c: 2.5,
            b_c: 0.75,
            nu: 2.2,
            a_alpha: 0.5,
            b_alpha: 0.5,
            truncation: 2,
        };
        let settings = SamplerSettings {
            n_iterations: 10,
            burn_in: 1,
            thin: 1,
            adapt: false,
            seed: 5,
            ..SamplerSettings::default()
        };
        let mut s = StationarySampler::new(&data, &cfg, &settings).unwrap();
        let st = StationaryChainState {
            state: StationaryState {
                components: vec![
                    StationaryComponent::new(0.2, 0.8, 0.3).unwrap(),
                    StationaryComponent::new(-0.6, 1.1, -0.2).unwrap(),
                ],
                sticks: StickVector::new(vec![0.55]).unwrap(),
                alpha: 1.1,
                psi: StationaryHyperparams {
                    m: 0.1,
                    v: 1.2,
                    s: 1.0,
                    theta: 0.1,
                    c: 0.4,
                    nu: 2.2,
                },
            },
            labels: vec![0, 0],
            iteration: 0,
            rng: RngState { seed: 5, word_pos_lo: 0, word_pos_hi: 0 },
        };
        s.set_chain_state(&st).unwrap();

        let mut draws = Vec::with_capacity(100_000);
        for _ in 0..100_000 {
            s.update_beta_for(0);
            draws.push(s.snapshot().components[0].beta);
        }
        // Oracle: unnormalized log target on a fine grid.
        let c0 = st.state.components[0];
        let psi = st.state.psi;
        let target = |b: f64| -> f64 {
            let rv = c0.sigma2 * (1.0 - b * b);
            normal_logpdf(b, psi.theta, psi.c)
                + normal_logpdf(data[1], c0.mu - b * (data[0] - c0.mu), rv)
                + normal_logpdf(data[2], c0.mu - b * (data[1] - c0.mu), rv)
        };
        let grid = linspace(-0.999_999, 0.999_999, 8001);
        let logs: Vec<f64> = grid.iter().map(|&b| target(b)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dens: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total = trapezoid(&grid, &dens);
        let step = grid[1] - grid[0];
        let mut cdf = Vec::with_capacity(grid.len());
        let mut acc = 0.0;
        let mut prev = dens[0];
        cdf.push(0.0);
        for &d in dens.iter().skip(1) {
            acc += 0.5 * (d + prev) * step;
            prev = d;
            cdf.push(acc / total);
        }
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let nf = draws.len() as f64;
        let mut ks = 0.0f64;
        for (gi, &g) in grid.iter().enumerate() {
            let emp = draws.partition_point(|&x| x <= g) as f64 / nf;
            ks = ks.max((emp - cdf[gi]).abs());
        }
        assert!(ks < 0.02, "ks = {ks}");
    }
}
