//! Model algebra for the label-invariant bias model.
//!
//! With `K` modeled characteristics every trial falls in one of `2^K` bias
//! cells. A cell switches on every bias term whose characteristics are all
//! flagged high/unclear in that cell. The trial effect in cell `c` of
//! meta-analysis `m` is
//!
//! ```text
//! theta ~ N(d_m + sum_{t active} b_{t,m},  tau2_m * prod_{t active} lambda_t)
//! ```
//!
//! and the arms follow binomial likelihoods on the logit scale with control
//! log-odds `mu` and treatment log-odds `mu + theta`.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::dataset::{Dataset, OutcomeType, TrialRecord};
use crate::error::{Error, Result};
use crate::stats::{log_expit, normal_ln_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Characteristic {
    /// Sequence generation.
    SG,
    /// Allocation concealment.
    AC,
    /// Blinding.
    BL,
}

impl Characteristic {
    pub const ALL: [Characteristic; 3] = [Characteristic::SG, Characteristic::AC, Characteristic::BL];

    pub fn description(self) -> &'static str {
        match self {
            Characteristic::SG => "sequence generation",
            Characteristic::AC => "allocation concealment",
            Characteristic::BL => "blinding",
        }
    }
}

impl fmt::Display for Characteristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Characteristic::SG => "SG",
            Characteristic::AC => "AC",
            Characteristic::BL => "BL",
        };
        f.write_str(s)
    }
}

/// One of the `2^K` combinations of risk classes. Bit `j` set means the
/// trial is at high/unclear risk for the `j`-th modeled characteristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BiasCell {
    mask: u8,
    len: usize,
}

impl BiasCell {
    pub fn from_flags(flags: &[bool]) -> Self {
        let mask = flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .fold(0u8, |m, (j, _)| m | (1 << j));
        Self { mask, len: flags.len() }
    }

    pub fn from_mask(mask: u8, len: usize) -> Self {
        Self { mask, len }
    }

    pub fn all_low(len: usize) -> Self {
        Self { mask: 0, len }
    }

    pub fn mask(self) -> u8 {
        self.mask
    }

    pub fn len(self) -> usize {
        self.len
    }

    pub fn is_empty(self) -> bool {
        self.len == 0
    }

    pub fn is_flagged(self, j: usize) -> bool {
        self.mask & (1 << j) != 0
    }

    /// All `2^len` cells in mask order.
    pub fn all(len: usize) -> impl Iterator<Item = BiasCell> {
        (0..(1u8 << len)).map(move |mask| BiasCell { mask, len })
    }
}

/// A nonempty subset of the modeled characteristics: singletons are main
/// effects, larger subsets interactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BiasTerm {
    mask: u8,
}

impl BiasTerm {
    pub fn from_mask(mask: u8) -> Self {
        assert!(mask != 0, "bias term must be a nonempty subset");
        Self { mask }
    }

    pub fn mask(self) -> u8 {
        self.mask
    }

    pub fn order(self) -> u32 {
        self.mask.count_ones()
    }

    pub fn is_active_in(self, cell: BiasCell) -> bool {
        self.mask & cell.mask == self.mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Tau2Covariates {
    #[default]
    None,
    OutcomeType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CellWeighting {
    #[default]
    MarginalIndependent,
    EmpiricalJoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGammaPrior {
    pub shape: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformPrior {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub location_prior_var: f64,
    pub lambda_prior: LogNormalPrior,
    pub phi2_prior: InverseGammaPrior,
    pub baseline_prior_var: f64,
    pub mu_tau_prior_var: f64,
    pub sigma_tau_prior: UniformPrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            location_prior_var: 1000.0,
            lambda_prior: LogNormalPrior { mean: 0.0, sd: 1.0 },
            phi2_prior: InverseGammaPrior {
                shape: 0.001,
                rate: 0.001,
            },
            baseline_prior_var: 1000.0,
            mu_tau_prior_var: 1000.0,
            sigma_tau_prior: UniformPrior { lower: 0.0, upper: 2.0 },
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("location_prior_var", self.location_prior_var),
            ("lambda_prior.sd", self.lambda_prior.sd),
            ("phi2_prior.shape", self.phi2_prior.shape),
            ("phi2_prior.rate", self.phi2_prior.rate),
            ("baseline_prior_var", self.baseline_prior_var),
            ("mu_tau_prior_var", self.mu_tau_prior_var),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        let u = self.sigma_tau_prior;
        if !(u.lower == 0.0 && u.upper > 0.0 && u.upper.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "sigma_tau_prior must be uniform(0, upper > 0), got ({}, {})",
                u.lower, u.upper
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub characteristics: Vec<Characteristic>,
    #[serde(default = "default_true")]
    pub include_interactions: bool,
    #[serde(default)]
    pub tau2_covariates: Tau2Covariates,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub cell_weighting: CellWeighting,
}

fn default_true() -> bool {
    true
}

pub const PRESETS: [&str; 7] = ["A1", "A2", "A3", "B1", "B2", "B3", "B4"];

impl ModelSpec {
    pub fn new(characteristics: Vec<Characteristic>, include_interactions: bool) -> Result<Self> {
        let spec = Self {
            characteristics,
            include_interactions,
            tau2_covariates: Tau2Covariates::None,
            priors: PriorConfig::default(),
            cell_weighting: CellWeighting::MarginalIndependent,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Named models: A1-A3 single characteristic, B1-B3 pairs with their
    /// interaction, B4 all three with every interaction.
    pub fn preset(name: &str) -> Result<Self> {
        use Characteristic::*;
        let chars = match name.to_ascii_uppercase().as_str() {
            "A1" => vec![SG],
            "A2" => vec![AC],
            "A3" => vec![BL],
            "B1" => vec![SG, AC],
            "B2" => vec![SG, BL],
            "B3" => vec![AC, BL],
            "B4" => vec![SG, AC, BL],
            other => return Err(Error::InvalidSpec(format!("unknown preset `{other}`"))),
        };
        Self::new(chars, true)
    }

    /// The preset name this spec corresponds to, if any.
    pub fn preset_name(&self) -> Option<&'static str> {
        if !self.include_interactions && self.k() > 1 {
            return None;
        }
        PRESETS.into_iter().find(|p| {
            Self::preset(p)
                .map(|s| s.characteristics == self.characteristics)
                .unwrap_or(false)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.characteristics.len();
        if !(1..=3).contains(&k) {
            return Err(Error::InvalidSpec(format!(
                "between 1 and 3 characteristics required, got {k}"
            )));
        }
        for (i, c) in self.characteristics.iter().enumerate() {
            if self.characteristics[..i].contains(c) {
                return Err(Error::InvalidSpec(format!("characteristic {c} listed twice")));
            }
        }
        self.priors.validate()
    }

    pub fn k(&self) -> usize {
        self.characteristics.len()
    }

    pub fn n_cells(&self) -> usize {
        1 << self.k()
    }

    /// Main effects first, then interactions by increasing order.
    pub fn terms(&self) -> Vec<BiasTerm> {
        let k = self.k();
        let mut masks: Vec<u8> = (1..(1u8 << k))
            .filter(|m| self.include_interactions || m.count_ones() == 1)
            .collect();
        masks.sort_by_key(|m| (m.count_ones(), *m));
        masks.into_iter().map(BiasTerm::from_mask).collect()
    }

    pub fn n_terms(&self) -> usize {
        self.terms().len()
    }

    pub fn term_label(&self, term: BiasTerm) -> String {
        self.characteristics
            .iter()
            .enumerate()
            .filter(|(j, _)| term.mask & (1 << j) != 0)
            .map(|(_, c)| c.to_string())
            .collect::<Vec<_>>()
            .join(":")
    }

    pub fn cell_label(&self, cell: BiasCell) -> String {
        self.characteristics
            .iter()
            .enumerate()
            .map(|(j, c)| format!("{c}={}", if cell.is_flagged(j) { "H" } else { "L" }))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn n_covariates(&self) -> usize {
        match self.tau2_covariates {
            Tau2Covariates::None => 0,
            Tau2Covariates::OutcomeType => 2,
        }
    }

    /// Indicator covariates for the heterogeneity regression, mortality as baseline.
    pub fn covariates(&self, outcome: OutcomeType) -> Vec<f64> {
        match self.tau2_covariates {
            Tau2Covariates::None => Vec::new(),
            Tau2Covariates::OutcomeType => match outcome {
                OutcomeType::Mortality => vec![0.0, 0.0],
                OutcomeType::ObjectiveOther => vec![1.0, 0.0],
                OutcomeType::Subjective => vec![0.0, 1.0],
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_cell(cell: BiasCell, spec: &ModelSpec) -> Result<()> {
    if cell.len() != spec.k() {
        return Err(Error::Dimension(format!(
            "cell has {} flags but the model has {} characteristics",
            cell.len(),
            spec.k()
        )));
    }
    Ok(())
}

/// Indices into `spec.terms()` of the terms switched on in `cell`.
pub fn active_term_indices(cell: BiasCell, spec: &ModelSpec) -> Result<Vec<usize>> {
    check_cell(cell, spec)?;
    Ok(spec
        .terms()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_active_in(cell))
        .map(|(i, _)| i)
        .collect())
}

pub fn active_terms(cell: BiasCell, spec: &ModelSpec) -> Result<Vec<BiasTerm>> {
    check_cell(cell, spec)?;
    Ok(spec.terms().into_iter().filter(|t| t.is_active_in(cell)).collect())
}

fn check_term_values(values: &[f64], spec: &ModelSpec, what: &str) -> Result<()> {
    if values.len() != spec.n_terms() {
        return Err(Error::MissingParameter(format!(
            "{what}: expected {} term values, got {}",
            spec.n_terms(),
            values.len()
        )));
    }
    Ok(())
}

/// `d + sum of b_t over active terms`; `biases` is aligned with `spec.terms()`.
pub fn cell_mean(d: f64, biases: &[f64], cell: BiasCell, spec: &ModelSpec) -> Result<f64> {
    check_term_values(biases, spec, "bias")?;
    Ok(active_term_indices(cell, spec)?
        .into_iter()
        .fold(d, |acc, i| acc + biases[i]))
}

/// `tau2 * product of lambda_t over active terms`; `lambdas` is aligned with `spec.terms()`.
pub fn cell_variance(tau2: f64, lambdas: &[f64], cell: BiasCell, spec: &ModelSpec) -> Result<f64> {
    check_term_values(lambdas, spec, "lambda")?;
    if !(tau2 > 0.0) {
        return Err(Error::Domain(format!("tau2 must be positive, got {tau2}")));
    }
    let active = active_term_indices(cell, spec)?;
    let mut v = tau2;
    for i in active {
        if !(lambdas[i] > 0.0) {
            return Err(Error::Domain(format!("lambda must be positive, got {}", lambdas[i])));
        }
        v *= lambdas[i];
    }
    Ok(v)
}

/// Log binomial likelihood of both arms without the binomial coefficients.
pub fn trial_log_kernel(t: &TrialRecord, mu: f64, theta: f64) -> f64 {
    arm_log_kernel(t.events_ctrl, t.n_ctrl, mu) + arm_log_kernel(t.events_treat, t.n_treat, mu + theta)
}

#[inline]
fn arm_log_kernel(r: u64, n: u64, logit: f64) -> f64 {
    let mut ll = 0.0;
    if r > 0 {
        ll += r as f64 * log_expit(logit);
    }
    if n > r {
        ll += (n - r) as f64 * log_expit(-logit);
    }
    ll
}

/// `log Bin(events_ctrl; n_ctrl, expit(mu)) + log Bin(events_treat; n_treat, expit(mu + theta))`.
pub fn log_likelihood_trial(t: &TrialRecord, mu: f64, theta: f64) -> f64 {
    ln_binomial(t.n_ctrl, t.events_ctrl) + ln_binomial(t.n_treat, t.events_treat) + trial_log_kernel(t, mu, theta)
}

/// One point in the joint posterior. Per-trial vectors follow dataset order
/// (metas in order, trials in row order); `bias[m][t]` is aligned with
/// `spec.terms()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub d: Vec<f64>,
    pub tau2: Vec<f64>,
    pub bias: Vec<Vec<f64>>,
    pub b0: Vec<f64>,
    pub phi2: Vec<f64>,
    pub lambda: Vec<f64>,
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    pub mu_tau: f64,
    pub beta: Vec<f64>,
    pub sigma_tau: f64,
}

impl ParameterState {
    pub fn check_dims(&self, spec: &ModelSpec, ds: &Dataset) -> Result<()> {
        let n_meta = ds.metas().len();
        let n_trial = ds.n_trials();
        let n_term = spec.n_terms();
        let checks = [
            ("d", self.d.len(), n_meta),
            ("tau2", self.tau2.len(), n_meta),
            ("bias", self.bias.len(), n_meta),
            ("b0", self.b0.len(), n_term),
            ("phi2", self.phi2.len(), n_term),
            ("lambda", self.lambda.len(), n_term),
            ("theta", self.theta.len(), n_trial),
            ("mu", self.mu.len(), n_trial),
            ("beta", self.beta.len(), spec.n_covariates()),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Dimension(format!("{name}: expected {want}, got {got}")));
            }
        }
        if let Some(row) = self.bias.iter().find(|row| row.len() != n_term) {
            return Err(Error::Dimension(format!(
                "bias row: expected {n_term} terms, got {}",
                row.len()
            )));
        }
        Ok(())
    }
}

/// Sum of the trial log-likelihoods.
pub fn log_likelihood(state: &ParameterState, ds: &Dataset) -> f64 {
    ds.trials()
        .zip(state.theta.iter().zip(&state.mu))
        .map(|(t, (&theta, &mu))| log_likelihood_trial(t, mu, theta))
        .sum()
}

fn log_normal_ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    normal_ln_pdf(x.ln(), mean, sd * sd) - x.ln()
}

fn inverse_gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - statrs::function::gamma::ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// Log joint prior density of every parameter, including the random-effects
/// distribution of the trial effects, on the natural scale of each parameter.
/// Returns `-inf` outside the support.
pub fn log_prior(state: &ParameterState, spec: &ModelSpec, ds: &Dataset) -> Result<f64> {
    state.check_dims(spec, ds)?;
    let p = &spec.priors;
    let upper = p.sigma_tau_prior.upper;
    if !(state.sigma_tau > 0.0 && state.sigma_tau < upper) {
        return Ok(f64::NEG_INFINITY);
    }
    let positive = state
        .tau2
        .iter()
        .chain(&state.phi2)
        .chain(&state.lambda)
        .all(|&v| v > 0.0 && v.is_finite());
    if !positive {
        return Ok(f64::NEG_INFINITY);
    }

    let mut lp = -upper.ln();
    lp += normal_ln_pdf(state.mu_tau, 0.0, p.mu_tau_prior_var);
    lp += state
        .beta
        .iter()
        .map(|&b| normal_ln_pdf(b, 0.0, p.location_prior_var))
        .sum::<f64>();
    for t in 0..spec.n_terms() {
        lp += normal_ln_pdf(state.b0[t], 0.0, p.location_prior_var);
        lp += inverse_gamma_ln_pdf(state.phi2[t], p.phi2_prior.shape, p.phi2_prior.rate);
        lp += log_normal_ln_pdf(state.lambda[t], p.lambda_prior.mean, p.lambda_prior.sd);
    }

    let sigma2 = state.sigma_tau * state.sigma_tau;
    let mut offset = 0;
    for (m, meta) in ds.metas().iter().enumerate() {
        lp += normal_ln_pdf(state.d[m], 0.0, p.location_prior_var);
        let x = spec.covariates(meta.outcome());
        let loc = state.mu_tau + x.iter().zip(&state.beta).map(|(a, b)| a * b).sum::<f64>();
        lp += normal_ln_pdf(state.tau2[m].ln(), loc, sigma2) - state.tau2[m].ln();
        for t in 0..spec.n_terms() {
            lp += normal_ln_pdf(state.bias[m][t], state.b0[t], state.phi2[t]);
        }
        for (i, trial) in meta.trials().iter().enumerate() {
            let cell = BiasCell::from_mask(trial.cell_mask(&spec.characteristics), spec.k());
            let mean = cell_mean(state.d[m], &state.bias[m], cell, spec)?;
            let var = cell_variance(state.tau2[m], &state.lambda, cell, spec)?;
            lp += normal_ln_pdf(state.theta[offset + i], mean, var);
            lp += normal_ln_pdf(state.mu[offset + i], 0.0, p.baseline_prior_var);
        }
        offset += meta.len();
    }
    Ok(lp)
}
