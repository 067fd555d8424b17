//! Residual deviance and the deviance information criterion.
//!
//! The plug-in deviance is evaluated at the posterior mean of the fitted arm
//! probabilities rather than at the posterior mean of the basic parameters.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::stats::{self, log_expit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicResult {
    pub d_res_bar: f64,
    pub p_d: f64,
    pub dic: f64,
}

/// `r ln(r / n)` with `0 ln 0 = 0`.
fn xlogx_over(r: f64, n: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * (r / n).ln()
    }
}

/// `2 [r ln(r / (n p)) + (n - r) ln((n - r) / (n - n p))]` for an arm whose
/// fitted probability is `expit(logit)`.
pub fn arm_deviance_logit(r: u64, n: u64, logit: f64) -> f64 {
    let (rf, nf) = (r as f64, n as f64);
    let fail = nf - rf;
    let mut d = xlogx_over(rf, nf) + xlogx_over(fail, nf);
    if r > 0 {
        d -= rf * log_expit(logit);
    }
    if fail > 0.0 {
        d -= fail * log_expit(-logit);
    }
    2.0 * d
}

/// Same as [`arm_deviance_logit`] with the fitted probability given directly.
pub fn arm_deviance_prob(r: u64, n: u64, p: f64) -> f64 {
    let (rf, nf) = (r as f64, n as f64);
    let fail = nf - rf;
    let mut d = xlogx_over(rf, nf) + xlogx_over(fail, nf);
    if r > 0 {
        d -= rf * p.ln();
    }
    if fail > 0.0 {
        d -= fail * (1.0 - p).ln();
    }
    2.0 * d
}

/// Residual deviance of the whole dataset at fitted probabilities
/// `(control, treatment)` per trial, in dataset order.
pub fn residual_deviance(ds: &Dataset, fitted: &[[f64; 2]]) -> Result<f64> {
    if fitted.len() != ds.n_trials() {
        return Err(Error::Dimension(format!(
            "expected fitted probabilities for {} trials, got {}",
            ds.n_trials(),
            fitted.len()
        )));
    }
    Ok(ds
        .trials()
        .zip(fitted)
        .map(|(t, [pc, pt])| {
            arm_deviance_prob(t.events_ctrl, t.n_ctrl, *pc) + arm_deviance_prob(t.events_treat, t.n_treat, *pt)
        })
        .sum())
}

/// DIC from per-draw residual deviances and posterior-mean fitted probabilities.
pub fn dic_from_parts(deviance_draws: &[f64], mean_fitted: &[[f64; 2]], ds: &Dataset) -> Result<DicResult> {
    if deviance_draws.is_empty() {
        return Err(Error::InsufficientData("no deviance draws".into()));
    }
    let d_res_bar = stats::mean(deviance_draws);
    let plug_in = residual_deviance(ds, mean_fitted)?;
    let p_d = d_res_bar - plug_in;
    Ok(DicResult {
        d_res_bar,
        p_d,
        dic: d_res_bar + p_d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_arm_has_zero_deviance() {
        for (r, n) in [(0u64, 10u64), (10, 10), (3, 10)] {
            let p = r as f64 / n as f64;
            assert_eq!(arm_deviance_prob(r, n, p), 0.0);
        }
        assert!(arm_deviance_logit(3, 10, (0.3f64 / 0.7).ln()).abs() < 1e-12);
    }

    #[test]
    fn logit_and_prob_forms_agree() {
        for (r, n, x) in [(0u64, 12u64, -1.3), (12, 12, 2.0), (5, 40, 0.25)] {
            let p = crate::stats::expit(x);
            let a = arm_deviance_logit(r, n, x);
            let b = arm_deviance_prob(r, n, p);
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            assert!(a >= 0.0);
        }
    }
}
