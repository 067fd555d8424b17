use std::ops::Range;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{param_names, ChainSamples, McmcConfig};
use crate::dataset::{filter_eligible, Dataset, TrialRecord};
use crate::error::{Error, Result};
use crate::model::{log_likelihood, log_prior, trial_log_kernel, ModelSpec, ParameterState, PriorConfig};
use crate::stats::{expit, log_expit};

use super::dic::arm_deviance_logit;

const ADAPT_BATCH: usize = 50;

/// Floor for conjugate variance draws; keeps the location precision finite.
const MIN_VARIANCE: f64 = 1e-12;

const INIT_TAU2: f64 = 0.04;
const INIT_PHI2: f64 = 0.04;
const INIT_SHIFT: f64 = 2.0;
const INIT_SCALE_FACTOR: f64 = 4.0;

/// Index structures shared by every update.
struct Layout<'a> {
    trials: Vec<&'a TrialRecord>,
    trial_meta: Vec<usize>,
    /// Active term indices per trial.
    trial_active: Vec<Vec<usize>>,
    meta_range: Vec<Range<usize>>,
    /// Trials in which each term is active.
    term_trials: Vec<Vec<usize>>,
    covariates: Vec<Vec<f64>>,
    n_terms: usize,
}

impl<'a> Layout<'a> {
    fn new(spec: &ModelSpec, ds: &'a Dataset) -> Self {
        let terms = spec.terms();
        let mut trials = Vec::with_capacity(ds.n_trials());
        let mut trial_meta = Vec::new();
        let mut trial_active = Vec::new();
        let mut meta_range = Vec::new();
        let mut term_trials = vec![Vec::new(); terms.len()];
        for (m, meta) in ds.metas().iter().enumerate() {
            let start = trials.len();
            for t in meta.trials() {
                let i = trials.len();
                let mask = t.cell_mask(&spec.characteristics);
                let active: Vec<usize> = terms
                    .iter()
                    .enumerate()
                    .filter(|(_, term)| term.mask() & mask == term.mask())
                    .map(|(j, _)| j)
                    .collect();
                for &j in &active {
                    term_trials[j].push(i);
                }
                trials.push(t);
                trial_meta.push(m);
                trial_active.push(active);
            }
            meta_range.push(start..trials.len());
        }
        let covariates = ds.metas().iter().map(|m| spec.covariates(m.outcome())).collect();
        Self {
            trials,
            trial_meta,
            trial_active,
            meta_range,
            term_trials,
            covariates,
            n_terms: terms.len(),
        }
    }
}

fn empirical_log_or(t: &TrialRecord) -> (f64, f64) {
    let (a, b) = (t.events_treat as f64, (t.n_treat - t.events_treat) as f64);
    let (c, d) = (t.events_ctrl as f64, (t.n_ctrl - t.events_ctrl) as f64);
    let k = if a * b * c * d == 0.0 { 0.5 } else { 0.0 };
    let (a, b, c, d) = (a + k, b + k, c + k, d + k);
    ((a * d / (b * c)).ln(), 1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d)
}

fn empirical_logit_ctrl(t: &TrialRecord) -> f64 {
    let (c, d) = (t.events_ctrl as f64, (t.n_ctrl - t.events_ctrl) as f64);
    let k = if c * d == 0.0 { 0.5 } else { 0.0 };
    ((c + k) / (d + k)).ln()
}

/// Inverse-variance pooled log odds ratio.
fn pooled_log_or<'t>(trials: impl Iterator<Item = &'t TrialRecord>) -> Option<f64> {
    let (num, den) = trials.fold((0.0, 0.0), |(n, w), t| {
        let (y, v) = empirical_log_or(t);
        (n + y / v, w + 1.0 / v)
    });
    (den > 0.0).then(|| num / den)
}

/// Starting point for chain `chain_index`.
///
/// Chain 0 is central: trial effects and control log-odds at their empirical
/// values, `d_m` at the pooled log odds ratio of the meta's all-low-risk
/// trials, main-effect biases at the pooled difference of flagged trials,
/// `lambda = 1` and `tau2 = 0.04`. Chain `k >= 1` shifts every location by
/// `+2` (odd `k`) or `-2` (even `k`) and multiplies `lambda`, `tau2` and
/// `phi2` by `4` or `1/4` correspondingly.
pub fn initial_state(spec: &ModelSpec, ds: &Dataset, chain_index: usize) -> ParameterState {
    let n_terms = spec.n_terms();
    let terms = spec.terms();
    let mut theta = Vec::with_capacity(ds.n_trials());
    let mut mu = Vec::with_capacity(ds.n_trials());
    let mut d = Vec::new();
    let mut bias = Vec::new();
    for meta in ds.metas() {
        for t in meta.trials() {
            theta.push(empirical_log_or(t).0);
            mu.push(empirical_logit_ctrl(t));
        }
        let low = meta.trials().iter().filter(|t| t.cell_mask(&spec.characteristics) == 0);
        let dm = pooled_log_or(low)
            .or_else(|| pooled_log_or(meta.trials().iter()))
            .unwrap_or(0.0);
        let b: Vec<f64> = terms
            .iter()
            .map(|term| {
                if term.order() != 1 {
                    return 0.0;
                }
                let flagged = meta
                    .trials()
                    .iter()
                    .filter(|t| t.cell_mask(&spec.characteristics) & term.mask() != 0);
                pooled_log_or(flagged).map(|y| y - dm).unwrap_or(0.0)
            })
            .collect();
        d.push(dm);
        bias.push(b);
    }
    let b0: Vec<f64> = (0..n_terms)
        .map(|t| bias.iter().map(|b| b[t]).sum::<f64>() / bias.len().max(1) as f64)
        .collect();

    let sign = match chain_index {
        0 => 0.0,
        k if k % 2 == 1 => 1.0,
        _ => -1.0,
    };
    let shift = sign * INIT_SHIFT;
    let factor = INIT_SCALE_FACTOR.powf(sign);
    let add = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x += shift);
    add(&mut theta);
    add(&mut mu);
    add(&mut d);
    let mut b0 = b0;
    add(&mut b0);
    for row in &mut bias {
        add(row);
    }

    let tau2 = INIT_TAU2 * factor;
    ParameterState {
        d,
        tau2: vec![tau2; ds.metas().len()],
        bias,
        b0,
        phi2: vec![INIT_PHI2 * factor; n_terms],
        lambda: vec![factor; n_terms],
        theta,
        mu,
        mu_tau: tau2.ln(),
        beta: vec![0.0; spec.n_covariates()],
        sigma_tau: spec.priors.sigma_tau_prior.upper / 2.0 * (1.0 + 0.5 * sign),
    }
}

/// Draws from `N(P^-1 h, P^-1)` given the precision `P` and linear term `h`.
pub fn draw_gaussian<R: Rng + ?Sized>(
    precision: DMatrix<f64>,
    linear: DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = linear.len();
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::Domain("conjugate precision is not positive definite".into()))?;
    let mean = chol.solve(&linear);
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Domain("singular Cholesky factor".into()))?;
    Ok(mean + noise)
}

/// Joint conjugate draw of `(d, b_1..b_T)` for one meta-analysis given its
/// trial effects: `theta_i ~ N(d + sum_{t in active_i} b_t, variances_i)`,
/// `d ~ N(0, d_prior_var)`, `b_t ~ N(b0_t, phi2_t)`.
#[allow(clippy::too_many_arguments)]
pub fn draw_meta_locations<R: Rng + ?Sized>(
    theta: &[f64],
    active: &[Vec<usize>],
    variances: &[f64],
    d_prior_var: f64,
    b0: &[f64],
    phi2: &[f64],
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let n_terms = b0.len();
    let p = 1 + n_terms;
    let mut prec = DMatrix::<f64>::zeros(p, p);
    let mut h = DVector::<f64>::zeros(p);
    prec[(0, 0)] = 1.0 / d_prior_var;
    for t in 0..n_terms {
        prec[(1 + t, 1 + t)] = 1.0 / phi2[t];
        h[1 + t] = b0[t] / phi2[t];
    }
    let mut idx = Vec::with_capacity(p);
    for ((&y, act), &v) in theta.iter().zip(active).zip(variances) {
        let w = 1.0 / v;
        idx.clear();
        idx.push(0);
        idx.extend(act.iter().map(|t| t + 1));
        for &a in &idx {
            h[a] += w * y;
            for &b in &idx {
                prec[(a, b)] += w;
            }
        }
    }
    let x = draw_gaussian(prec, h, rng)?;
    Ok((x[0], x.iter().skip(1).copied().collect()))
}

#[derive(Debug, Clone)]
struct Proposal {
    log_scale: f64,
    batch_accepted: u32,
    batch_tried: u32,
    accepted: u64,
    tried: u64,
}

impl Proposal {
    fn new(scale: f64) -> Self {
        Self {
            log_scale: scale.ln(),
            batch_accepted: 0,
            batch_tried: 0,
            accepted: 0,
            tried: 0,
        }
    }

    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn record(&mut self, accepted: bool, kept: bool) {
        self.batch_tried += 1;
        self.batch_accepted += accepted as u32;
        if kept {
            self.tried += 1;
            self.accepted += accepted as u64;
        }
    }

    fn adapt(&mut self, batch_no: usize, target: f64) {
        if self.batch_tried > 0 {
            let rate = self.batch_accepted as f64 / self.batch_tried as f64;
            let step = (3.0 * (rate - target) / (batch_no as f64).sqrt()).clamp(-1.0, 1.0);
            self.log_scale += step;
        }
        self.batch_accepted = 0;
        self.batch_tried = 0;
    }
}

struct Blocks {
    theta: Vec<Proposal>,
    mu: Vec<Proposal>,
    lambda: Vec<Proposal>,
    lambda_rescale: Vec<Proposal>,
    bias_shift: Vec<Proposal>,
    tau2: Vec<Proposal>,
    tau2_rescale: Vec<Proposal>,
    location_shift: Vec<Proposal>,
    sigma_tau: Vec<Proposal>,
}

impl Blocks {
    fn all(&self) -> [(&'static str, &Vec<Proposal>); 9] {
        [
            ("theta", &self.theta),
            ("mu", &self.mu),
            ("lambda", &self.lambda),
            ("lambda_rescale", &self.lambda_rescale),
            ("bias_shift", &self.bias_shift),
            ("tau2", &self.tau2),
            ("tau2_rescale", &self.tau2_rescale),
            ("location_shift", &self.location_shift),
            ("sigma_tau", &self.sigma_tau),
        ]
    }

    fn all_mut(&mut self) -> [&mut Vec<Proposal>; 9] {
        [
            &mut self.theta,
            &mut self.mu,
            &mut self.lambda,
            &mut self.lambda_rescale,
            &mut self.bias_shift,
            &mut self.tau2,
            &mut self.tau2_rescale,
            &mut self.location_shift,
            &mut self.sigma_tau,
        ]
    }

    fn scales(&self) -> Vec<f64> {
        self.all()
            .iter()
            .flat_map(|(_, v)| v.iter().map(Proposal::scale))
            .collect()
    }

    fn acceptance(&self) -> IndexMap<String, f64> {
        self.all()
            .iter()
            .filter_map(|(name, v)| {
                let tried: u64 = v.iter().map(|p| p.tried).sum();
                let acc: u64 = v.iter().map(|p| p.accepted).sum();
                (tried > 0).then(|| (name.to_string(), acc as f64 / tried as f64))
            })
            .collect()
    }
}

struct Sampler<'a> {
    layout: Layout<'a>,
    priors: PriorConfig,
    state: ParameterState,
    /// Cached likelihood kernel per trial; zero when sampling the prior.
    loglik: Vec<f64>,
    use_likelihood: bool,
    blocks: Blocks,
    rng: ChaCha20Rng,
    scratch: Vec<(usize, f64, f64)>,
}

impl<'a> Sampler<'a> {
    fn new(spec: &ModelSpec, ds: &'a Dataset, state: ParameterState, cfg: &McmcConfig, seed: u64) -> Self {
        let layout = Layout::new(spec, ds);
        let use_likelihood = !cfg.prior_only;
        let loglik = layout
            .trials
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if use_likelihood {
                    trial_log_kernel(t, state.mu[i], state.theta[i])
                } else {
                    0.0
                }
            })
            .collect();
        let arm_sd = |r: u64, n: u64| {
            let p = ((r as f64 + 0.5) / (n as f64 + 1.0)).clamp(0.02, 0.98);
            (1.0 / (n as f64 * p * (1.0 - p))).sqrt()
        };
        let theta = layout
            .trials
            .iter()
            .map(|t| {
                let sd = (arm_sd(t.events_treat, t.n_treat).powi(2) + arm_sd(t.events_ctrl, t.n_ctrl).powi(2)).sqrt();
                Proposal::new(1.5 * sd.min(1.0))
            })
            .collect();
        let mu = layout
            .trials
            .iter()
            .map(|t| Proposal::new(1.5 * arm_sd(t.events_ctrl, t.n_ctrl).min(1.0)))
            .collect();
        let n_terms = layout.n_terms;
        let n_meta = layout.meta_range.len();
        let blocks = Blocks {
            theta,
            mu,
            lambda: vec![Proposal::new(0.3); n_terms],
            lambda_rescale: vec![Proposal::new(0.1); n_terms],
            bias_shift: vec![Proposal::new(0.05); n_terms],
            tau2: vec![Proposal::new(0.5); n_meta],
            tau2_rescale: vec![Proposal::new(0.2); n_meta],
            location_shift: vec![Proposal::new(0.1); n_meta],
            sigma_tau: vec![Proposal::new(0.5)],
        };
        Self {
            layout,
            priors: spec.priors,
            state,
            loglik,
            use_likelihood,
            blocks,
            rng: ChaCha20Rng::seed_from_u64(seed),
            scratch: Vec::new(),
        }
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        // NaN compares false and rejects
        let u: f64 = self.rng.random();
        u.ln() < log_ratio
    }

    fn kernel(&self, i: usize, mu: f64, theta: f64) -> f64 {
        if self.use_likelihood {
            trial_log_kernel(self.layout.trials[i], mu, theta)
        } else {
            0.0
        }
    }

    fn cell_mean(&self, i: usize) -> f64 {
        let m = self.layout.trial_meta[i];
        self.layout.trial_active[i]
            .iter()
            .fold(self.state.d[m], |acc, &t| acc + self.state.bias[m][t])
    }

    fn cell_variance(&self, i: usize) -> f64 {
        let m = self.layout.trial_meta[i];
        self.layout.trial_active[i]
            .iter()
            .fold(self.state.tau2[m], |acc, &t| acc * self.state.lambda[t])
    }

    fn tau_location(&self, m: usize) -> f64 {
        self.state.mu_tau
            + self.layout.covariates[m]
                .iter()
                .zip(&self.state.beta)
                .map(|(x, b)| x * b)
                .sum::<f64>()
    }

    fn sweep(&mut self, kept: bool) -> Result<()> {
        self.update_trials(kept);
        self.update_locations()?;
        self.update_bias_hyper();
        self.update_lambda(kept);
        self.update_bias_shift(kept);
        self.update_tau2(kept);
        self.update_tau_regression()?;
        self.update_sigma_tau(kept);
        Ok(())
    }

    fn update_trials(&mut self, kept: bool) {
        let vb = self.priors.baseline_prior_var;
        for i in 0..self.layout.trials.len() {
            let cm = self.cell_mean(i);
            let v = self.cell_variance(i);
            let (mu, theta) = (self.state.mu[i], self.state.theta[i]);

            let prop = theta + self.blocks.theta[i].scale() * self.normal();
            let ll = self.kernel(i, mu, prop);
            let lr = ll - self.loglik[i] - 0.5 * ((prop - cm).powi(2) - (theta - cm).powi(2)) / v;
            let ok = self.accept(lr);
            if ok {
                self.state.theta[i] = prop;
                self.loglik[i] = ll;
            }
            self.blocks.theta[i].record(ok, kept);

            let theta = self.state.theta[i];
            let prop = mu + self.blocks.mu[i].scale() * self.normal();
            let ll = self.kernel(i, prop, theta);
            let lr = ll - self.loglik[i] - 0.5 * (prop * prop - mu * mu) / vb;
            let ok = self.accept(lr);
            if ok {
                self.state.mu[i] = prop;
                self.loglik[i] = ll;
            }
            self.blocks.mu[i].record(ok, kept);
        }
    }

    fn update_locations(&mut self) -> Result<()> {
        for m in 0..self.layout.meta_range.len() {
            let range = self.layout.meta_range[m].clone();
            let variances: Vec<f64> = range.clone().map(|i| self.cell_variance(i)).collect();
            let (d, b) = draw_meta_locations(
                &self.state.theta[range.clone()],
                &self.layout.trial_active[range],
                &variances,
                self.priors.location_prior_var,
                &self.state.b0,
                &self.state.phi2,
                &mut self.rng,
            )?;
            self.state.d[m] = d;
            self.state.bias[m] = b;
        }
        Ok(())
    }

    fn update_bias_hyper(&mut self) {
        let n_meta = self.layout.meta_range.len() as f64;
        let v0 = self.priors.location_prior_var;
        let ig = self.priors.phi2_prior;
        for t in 0..self.layout.n_terms {
            let phi2 = self.state.phi2[t];
            let sum: f64 = self.state.bias.iter().map(|b| b[t]).sum();
            let prec = 1.0 / v0 + n_meta / phi2;
            let b0 = sum / phi2 / prec + self.normal() / prec.sqrt();
            self.state.b0[t] = b0;

            let ss: f64 = self.state.bias.iter().map(|b| (b[t] - b0).powi(2)).sum();
            let shape = ig.shape + 0.5 * n_meta;
            let rate = ig.rate + 0.5 * ss;
            let g: f64 = Gamma::new(shape, 1.0)
                .expect("positive gamma shape")
                .sample(&mut self.rng);
            self.state.phi2[t] = (rate / g).max(MIN_VARIANCE);
        }
    }

    fn lambda_log_prior(&self, log_lambda: f64) -> f64 {
        let p = self.priors.lambda_prior;
        -0.5 * ((log_lambda - p.mean) / p.sd).powi(2)
    }

    fn update_lambda(&mut self, kept: bool) {
        for t in 0..self.layout.n_terms {
            let members = std::mem::take(&mut self.layout.term_trials[t]);
            let log_l = self.state.lambda[t].ln();

            // centered: trial effects held fixed
            let step = self.blocks.lambda[t].scale() * self.normal();
            let r = step.exp();
            let ss: f64 = members
                .iter()
                .map(|&i| (self.state.theta[i] - self.cell_mean(i)).powi(2) / self.cell_variance(i))
                .sum();
            let lr = -0.5 * members.len() as f64 * step - 0.5 * (1.0 / r - 1.0) * ss
                + self.lambda_log_prior(log_l + step)
                - self.lambda_log_prior(log_l);
            let ok = self.accept(lr);
            if ok {
                self.state.lambda[t] *= r;
            }
            self.blocks.lambda[t].record(ok, kept);

            // rescale standardized trial effects with lambda
            let log_l = self.state.lambda[t].ln();
            let step = self.blocks.lambda_rescale[t].scale() * self.normal();
            let sq = (0.5 * step).exp();
            let mut lr = self.lambda_log_prior(log_l + step) - self.lambda_log_prior(log_l);
            self.scratch.clear();
            for &i in &members {
                let cm = self.cell_mean(i);
                let th = cm + (self.state.theta[i] - cm) * sq;
                let ll = self.kernel(i, self.state.mu[i], th);
                lr += ll - self.loglik[i];
                self.scratch.push((i, th, ll));
            }
            let ok = self.accept(lr);
            if ok {
                self.state.lambda[t] = (log_l + step).exp();
                self.commit_scratch();
            }
            self.blocks.lambda_rescale[t].record(ok, kept);
            self.layout.term_trials[t] = members;
        }
    }

    fn commit_scratch(&mut self) {
        for &(i, th, ll) in &self.scratch {
            self.state.theta[i] = th;
            self.loglik[i] = ll;
        }
    }

    fn update_bias_shift(&mut self, kept: bool) {
        let v0 = self.priors.location_prior_var;
        for t in 0..self.layout.n_terms {
            let delta = self.blocks.bias_shift[t].scale() * self.normal();
            let b0 = self.state.b0[t];
            let mut lr = -0.5 * ((b0 + delta).powi(2) - b0 * b0) / v0;
            self.scratch.clear();
            for k in 0..self.layout.term_trials[t].len() {
                let i = self.layout.term_trials[t][k];
                let th = self.state.theta[i] + delta;
                let ll = self.kernel(i, self.state.mu[i], th);
                lr += ll - self.loglik[i];
                self.scratch.push((i, th, ll));
            }
            let ok = self.accept(lr);
            if ok {
                self.state.b0[t] += delta;
                for row in &mut self.state.bias {
                    row[t] += delta;
                }
                self.commit_scratch();
            }
            self.blocks.bias_shift[t].record(ok, kept);
        }
    }

    fn update_tau2(&mut self, kept: bool) {
        let sigma2 = self.state.sigma_tau.powi(2);
        let vd = self.priors.location_prior_var;
        for m in 0..self.layout.meta_range.len() {
            let range = self.layout.meta_range[m].clone();
            let loc = self.tau_location(m);
            let prior = |l: f64| -0.5 * (l - loc).powi(2) / sigma2;

            // centered
            let log_t = self.state.tau2[m].ln();
            let step = self.blocks.tau2[m].scale() * self.normal();
            let r = step.exp();
            let ss: f64 = range
                .clone()
                .map(|i| (self.state.theta[i] - self.cell_mean(i)).powi(2) / self.cell_variance(i))
                .sum();
            let lr = -0.5 * range.len() as f64 * step - 0.5 * (1.0 / r - 1.0) * ss + prior(log_t + step) - prior(log_t);
            let ok = self.accept(lr);
            if ok {
                self.state.tau2[m] *= r;
            }
            self.blocks.tau2[m].record(ok, kept);

            // rescale
            let log_t = self.state.tau2[m].ln();
            let step = self.blocks.tau2_rescale[m].scale() * self.normal();
            let sq = (0.5 * step).exp();
            let mut lr = prior(log_t + step) - prior(log_t);
            self.scratch.clear();
            for i in range.clone() {
                let cm = self.cell_mean(i);
                let th = cm + (self.state.theta[i] - cm) * sq;
                let ll = self.kernel(i, self.state.mu[i], th);
                lr += ll - self.loglik[i];
                self.scratch.push((i, th, ll));
            }
            let ok = self.accept(lr);
            if ok {
                self.state.tau2[m] = (log_t + step).exp();
                self.commit_scratch();
            }
            self.blocks.tau2_rescale[m].record(ok, kept);

            // shift d_m with the meta's effects
            let delta = self.blocks.location_shift[m].scale() * self.normal();
            let d = self.state.d[m];
            let mut lr = -0.5 * ((d + delta).powi(2) - d * d) / vd;
            self.scratch.clear();
            for i in range {
                let th = self.state.theta[i] + delta;
                let ll = self.kernel(i, self.state.mu[i], th);
                lr += ll - self.loglik[i];
                self.scratch.push((i, th, ll));
            }
            let ok = self.accept(lr);
            if ok {
                self.state.d[m] += delta;
                self.commit_scratch();
            }
            self.blocks.location_shift[m].record(ok, kept);
        }
    }

    fn update_tau_regression(&mut self) -> Result<()> {
        let p = 1 + self.state.beta.len();
        let w = 1.0 / self.state.sigma_tau.powi(2);
        let mut prec = DMatrix::<f64>::zeros(p, p);
        let mut h = DVector::<f64>::zeros(p);
        prec[(0, 0)] = 1.0 / self.priors.mu_tau_prior_var;
        for j in 1..p {
            prec[(j, j)] = 1.0 / self.priors.location_prior_var;
        }
        for m in 0..self.layout.meta_range.len() {
            let mut x = Vec::with_capacity(p);
            x.push(1.0);
            x.extend_from_slice(&self.layout.covariates[m]);
            let y = self.state.tau2[m].ln();
            for a in 0..p {
                h[a] += w * x[a] * y;
                for b in 0..p {
                    prec[(a, b)] += w * x[a] * x[b];
                }
            }
        }
        let draw = draw_gaussian(prec, h, &mut self.rng)?;
        self.state.mu_tau = draw[0];
        for j in 1..p {
            self.state.beta[j - 1] = draw[j];
        }
        Ok(())
    }

    fn update_sigma_tau(&mut self, kept: bool) {
        let upper = self.priors.sigma_tau_prior.upper;
        let resid: f64 = (0..self.layout.meta_range.len())
            .map(|m| (self.state.tau2[m].ln() - self.tau_location(m)).powi(2))
            .sum();
        let n = self.layout.meta_range.len() as f64;
        // density of u = logit(sigma / upper), Jacobian included
        let target = |u: f64| {
            let sigma = upper * expit(u);
            -n * sigma.ln() - 0.5 * resid / (sigma * sigma) + log_expit(u) + log_expit(-u)
        };
        let s = self.state.sigma_tau / upper;
        let u = (s / (1.0 - s)).ln();
        let prop = u + self.blocks.sigma_tau[0].scale() * self.normal();
        let ok = self.accept(target(prop) - target(u));
        if ok {
            self.state.sigma_tau = upper * expit(prop);
        }
        self.blocks.sigma_tau[0].record(ok, kept);
    }

    fn adapt(&mut self, batch_no: usize, target: f64) {
        for block in self.blocks.all_mut() {
            for p in block.iter_mut() {
                p.adapt(batch_no, target);
            }
        }
    }

    fn push_draw(&self, columns: &mut [Vec<f64>]) {
        let s = &self.state;
        let mut col = columns.iter_mut();
        let mut put = |v: f64| col.next().expect("column count").push(v);
        s.lambda.iter().for_each(|&v| put(v));
        s.b0.iter().for_each(|&v| put(v));
        s.phi2.iter().for_each(|&v| put(v));
        put(s.mu_tau);
        put(s.sigma_tau);
        s.beta.iter().for_each(|&v| put(v));
        for m in 0..s.d.len() {
            put(s.d[m]);
            put(s.tau2[m]);
            s.bias[m].iter().for_each(|&v| put(v));
        }
    }

    fn deviance_and_fitted(&self, fitted_sum: &mut [[f64; 2]]) -> f64 {
        let mut dev = 0.0;
        for (i, t) in self.layout.trials.iter().enumerate() {
            let (mu, theta) = (self.state.mu[i], self.state.theta[i]);
            dev += arm_deviance_logit(t.events_ctrl, t.n_ctrl, mu);
            dev += arm_deviance_logit(t.events_treat, t.n_treat, mu + theta);
            fitted_sum[i][0] += expit(mu);
            fitted_sum[i][1] += expit(mu + theta);
        }
        dev
    }
}

/// Runs one chain of the Metropolis-within-Gibbs sampler.
pub fn run_chain(spec: &ModelSpec, ds: &Dataset, cfg: &McmcConfig, chain_index: usize) -> Result<ChainSamples> {
    spec.validate()?;
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Ineligible("dataset has no meta-analyses".into()));
    }
    let (_, excluded) = filter_eligible(ds, &spec.characteristics);
    if !excluded.is_empty() {
        let detail: Vec<String> = excluded
            .iter()
            .map(|e| format!("{}: {}", e.meta_id, e.reason))
            .collect();
        return Err(Error::Ineligible(detail.join(", ")));
    }

    let state = initial_state(spec, ds, chain_index);
    let mut lp = log_prior(&state, spec, ds)?;
    if !cfg.prior_only {
        lp += log_likelihood(&state, ds);
    }
    if !lp.is_finite() {
        return Err(Error::NonFiniteInitialState { chain: chain_index });
    }

    let seed = cfg.seed ^ chain_index as u64;
    let mut sampler = Sampler::new(spec, ds, state, cfg, seed);
    let names = param_names(spec, ds);
    let n_saved = cfg.n_saved();
    let mut draws: Vec<Vec<f64>> = (0..names.len()).map(|_| Vec::with_capacity(n_saved)).collect();
    let mut deviance = Vec::with_capacity(n_saved);
    let mut fitted_sum = vec![[0.0; 2]; ds.n_trials()];

    let mut scales_after_burnin = sampler.blocks.scales();
    let mut batch_no = 0;
    for iter in 0..cfg.n_burnin + cfg.n_iter {
        let kept = iter >= cfg.n_burnin;
        sampler.sweep(kept)?;
        if !kept {
            if cfg.adapt_during_burnin && (iter + 1) % ADAPT_BATCH == 0 {
                batch_no += 1;
                sampler.adapt(batch_no, cfg.target_accept);
            }
            if iter + 1 == cfg.n_burnin {
                scales_after_burnin = sampler.blocks.scales();
            }
            continue;
        }
        let t = iter - cfg.n_burnin + 1;
        if t.is_multiple_of(cfg.thin) {
            sampler.push_draw(&mut draws);
            deviance.push(sampler.deviance_and_fitted(&mut fitted_sum));
        }
    }

    let k = deviance.len().max(1) as f64;
    let mean_fitted = fitted_sum.into_iter().map(|[a, b]| [a / k, b / k]).collect();
    Ok(ChainSamples {
        chain_index,
        seed,
        names,
        draws,
        deviance,
        mean_fitted,
        acceptance: sampler.blocks.acceptance(),
        scales_after_burnin,
        scales_final: sampler.blocks.scales(),
    })
}
