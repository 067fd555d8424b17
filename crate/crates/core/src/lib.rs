//! Label-invariant Bayesian hierarchical models for meta-epidemiological data.
//!
//! Trials within each meta-analysis are split by dichotomized risk-of-bias
//! judgments. Trials at high or unclear risk get their own average bias and a
//! multiplicative heterogeneity ratio `lambda`, which may fall either side of
//! one. The crate fits these models with a Metropolis-within-Gibbs sampler and
//! decomposes each meta-analysis's total heterogeneity into the share
//! attributable to trials at high or unclear risk and the residual share.
//!
//! Modules:
//! - [`dataset`]: trial records, CSV ingest, eligibility and descriptive tables
//! - [`model`]: bias cells and terms, cell moments, likelihood and priors
//! - [`mcmc`]: the sampler, multi-chain runs, diagnostics and DIC
//! - [`decompose`]: total heterogeneity variance and proportion explained
//! - [`simulate`]: synthetic datasets and Monte Carlo oracles
//! - [`report`]: tables, figure data and the SVG scatter
//! - [`cli`]: command-line orchestration

// NaN must fail the domain checks, so they are written as negated comparisons
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod decompose;
pub mod error;
pub mod mcmc;
pub mod model;
pub mod report;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
