//! Metropolis-within-Gibbs sampling of the joint posterior.
//!
//! Each iteration runs these blocks in order:
//!
//! 1. per trial, random-walk updates of the effect `theta` and the control
//!    log-odds `mu`;
//! 2. per meta-analysis, a joint conjugate normal draw of `d` and the biases;
//! 3. per term, conjugate draws of `b0` and of `phi2` (inverse-gamma);
//! 4. per term, a log-scale random walk on `lambda`, followed by a joint move
//!    that rescales the affected trial effects around their cell means;
//! 5. per term, a shift of `b0`, the per-meta biases and the affected effects;
//! 6. per meta-analysis, a log-scale random walk on `tau2`, the matching
//!    rescaling move, and a shift of `d` with the meta's effects;
//! 7. a conjugate draw of the heterogeneity regression (`mu_tau`, `beta`);
//! 8. a random walk on `logit(sigma_tau / upper)`.
//!
//! Proposal scales adapt in batches of 50 iterations during burn-in and are
//! frozen afterwards. Chain `k` draws from a ChaCha20 stream seeded with
//! `seed ^ k`, so results do not depend on how chains are scheduled.

mod diagnostics;
mod dic;
mod io;
mod sampler;

use std::thread;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use diagnostics::{gelman_rubin, mc_error, summarize_param, PosteriorSummary};
pub use dic::{arm_deviance_logit, arm_deviance_prob, dic_from_parts, residual_deviance, DicResult};
pub use io::{read_chain_csv, write_chain_csv, ChainTable};
pub use sampler::{draw_gaussian, draw_meta_locations, initial_state, run_chain};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// R-hat above this flags a monitored parameter as not converged.
pub const RHAT_THRESHOLD: f64 = 1.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub n_burnin: usize,
    pub n_chains: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_during_burnin: bool,
    pub target_accept: f64,
    /// Drop the binomial likelihood and sample the prior.
    pub prior_only: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iter: 100_000,
            n_burnin: 10_000,
            n_chains: 2,
            thin: 1,
            seed: 1,
            adapt_during_burnin: true,
            target_accept: 0.35,
            prior_only: false,
        }
    }
}

impl McmcConfig {
    /// Two chains, 1,000 burn-in and 10,000 kept iterations.
    pub fn fast() -> Self {
        Self {
            n_iter: 10_000,
            n_burnin: 1_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::InvalidSpec("n_iter must be positive".into()));
        }
        if self.n_chains == 0 {
            return Err(Error::InvalidSpec("n_chains must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::InvalidSpec("thin must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidSpec("target_accept must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn n_saved(&self) -> usize {
        self.n_iter / self.thin
    }
}

/// Column names used in chain files and summaries.
pub mod names {
    pub const MU_TAU: &str = "mu_tau";
    pub const SIGMA_TAU: &str = "sigma_tau";

    pub fn lambda(term: &str) -> String {
        format!("lambda[{term}]")
    }

    pub fn b0(term: &str) -> String {
        format!("b0[{term}]")
    }

    pub fn phi2(term: &str) -> String {
        format!("phi2[{term}]")
    }

    pub fn beta(covariate: &str) -> String {
        format!("beta[{covariate}]")
    }

    pub fn d(meta: &str) -> String {
        format!("d[{meta}]")
    }

    pub fn tau2(meta: &str) -> String {
        format!("tau2[{meta}]")
    }

    pub fn bias(term: &str, meta: &str) -> String {
        format!("b[{term}][{meta}]")
    }
}

pub const COVARIATE_NAMES: [&str; 2] = ["objective", "subjective"];

/// Saved parameter names in column order: global parameters first, then
/// per-meta `d`, `tau2` and biases.
pub fn param_names(spec: &ModelSpec, ds: &Dataset) -> Vec<String> {
    let labels: Vec<String> = spec.terms().into_iter().map(|t| spec.term_label(t)).collect();
    let mut out: Vec<String> = Vec::new();
    out.extend(labels.iter().map(|l| names::lambda(l)));
    out.extend(labels.iter().map(|l| names::b0(l)));
    out.extend(labels.iter().map(|l| names::phi2(l)));
    out.push(names::MU_TAU.to_string());
    out.push(names::SIGMA_TAU.to_string());
    out.extend(COVARIATE_NAMES[..spec.n_covariates()].iter().map(|c| names::beta(c)));
    for meta in ds.metas() {
        let id = meta.meta_id();
        out.push(names::d(id));
        out.push(names::tau2(id));
        out.extend(labels.iter().map(|l| names::bias(l, id)));
    }
    out
}

/// Parameters gated by the convergence check: every `lambda`, `b0` and
/// `phi2`, plus `mu_tau` and `sigma_tau`.
pub fn monitored_names(spec: &ModelSpec) -> Vec<String> {
    let labels: Vec<String> = spec.terms().into_iter().map(|t| spec.term_label(t)).collect();
    let mut out: Vec<String> = Vec::new();
    out.extend(labels.iter().map(|l| names::lambda(l)));
    out.extend(labels.iter().map(|l| names::b0(l)));
    out.extend(labels.iter().map(|l| names::phi2(l)));
    out.push(names::MU_TAU.to_string());
    out.push(names::SIGMA_TAU.to_string());
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSamples {
    pub chain_index: usize,
    /// Seed of the chain's generator (`cfg.seed ^ chain_index`).
    pub seed: u64,
    pub names: Vec<String>,
    /// One column per name, `floor(n_iter / thin)` draws each.
    pub draws: Vec<Vec<f64>>,
    /// Residual deviance at each saved draw.
    pub deviance: Vec<f64>,
    /// Mean fitted `(control, treatment)` event probabilities per trial.
    pub mean_fitted: Vec<[f64; 2]>,
    /// Post-burn-in acceptance rate per random-walk block.
    pub acceptance: IndexMap<String, f64>,
    pub scales_after_burnin: Vec<f64>,
    pub scales_final: Vec<f64>,
}

impl ChainSamples {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.draws[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.deviance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deviance.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub chains: Vec<ChainSamples>,
    pub summaries: IndexMap<String, PosteriorSummary>,
    pub monitored: Vec<String>,
    /// Monitored parameters with R-hat above [`RHAT_THRESHOLD`].
    pub flagged: Vec<String>,
}

impl PosteriorSamples {
    /// Summarizes every column of `chains`. All chains must share names and lengths.
    pub fn from_chains(chains: Vec<ChainSamples>, monitored: Vec<String>) -> Result<Self> {
        let first = chains
            .first()
            .ok_or_else(|| Error::InsufficientData("no chains".into()))?;
        if chains.iter().any(|c| c.names != first.names || c.len() != first.len()) {
            return Err(Error::Dimension("chains disagree on parameters or length".into()));
        }
        let mut summaries = IndexMap::new();
        for (j, name) in first.names.iter().enumerate() {
            let per_chain: Vec<&[f64]> = chains.iter().map(|c| c.draws[j].as_slice()).collect();
            let pooled: Vec<f64> = per_chain.concat();
            summaries.insert(name.clone(), summarize_param(&pooled, &per_chain)?);
        }
        let flagged = monitored
            .iter()
            .filter(|m| {
                summaries
                    .get(*m)
                    .and_then(|s: &PosteriorSummary| s.r_hat)
                    .is_some_and(|r| !(r <= RHAT_THRESHOLD))
            })
            .cloned()
            .collect();
        Ok(Self {
            chains,
            summaries,
            monitored,
            flagged,
        })
    }

    /// Draws of `name` from all chains, concatenated in chain order.
    pub fn pooled(&self, name: &str) -> Option<Vec<f64>> {
        let cols: Option<Vec<&[f64]>> = self.chains.iter().map(|c| c.column(name)).collect();
        cols.map(|c| c.concat())
    }

    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(ChainSamples::len).sum()
    }

    pub fn summary(&self, name: &str) -> Option<&PosteriorSummary> {
        self.summaries.get(name)
    }

    pub fn converged(&self) -> bool {
        self.flagged.is_empty()
    }

    /// Acceptance rates averaged over chains.
    pub fn acceptance(&self) -> IndexMap<String, f64> {
        let mut out: IndexMap<String, f64> = IndexMap::new();
        for c in &self.chains {
            for (k, v) in &c.acceptance {
                *out.entry(k.clone()).or_default() += v / self.chains.len() as f64;
            }
        }
        out
    }
}

/// Runs `cfg.n_chains` chains, concurrently, and summarizes the pooled draws.
pub fn run_analysis(spec: &ModelSpec, ds: &Dataset, cfg: &McmcConfig) -> Result<PosteriorSamples> {
    cfg.validate()?;
    let results: Vec<Result<ChainSamples>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.n_chains)
            .map(|k| scope.spawn(move || run_chain(spec, ds, cfg, k)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    });
    let chains = results.into_iter().collect::<Result<Vec<_>>>()?;
    PosteriorSamples::from_chains(chains, monitored_names(spec))
}

/// DIC pooled over all chains of a fit.
pub fn dic(samples: &PosteriorSamples, ds: &Dataset) -> Result<DicResult> {
    let deviance: Vec<f64> = samples.chains.iter().flat_map(|c| c.deviance.iter().copied()).collect();
    let total = samples.n_draws() as f64;
    let mut mean_fitted = vec![[0.0; 2]; ds.n_trials()];
    for c in &samples.chains {
        if c.mean_fitted.len() != mean_fitted.len() {
            return Err(Error::Dimension("fitted probabilities do not match the dataset".into()));
        }
        let w = c.len() as f64 / total;
        for (acc, p) in mean_fitted.iter_mut().zip(&c.mean_fitted) {
            acc[0] += w * p[0];
            acc[1] += w * p[1];
        }
    }
    dic_from_parts(&deviance, &mean_fitted, ds)
}
