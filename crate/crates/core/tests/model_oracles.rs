mod common;

use proptest::prelude::*;
use robhet::dataset::OutcomeType;
use robhet::model::{log_likelihood, log_likelihood_trial, log_prior, ModelSpec, ParameterState, Tau2Covariates};
use statrs::distribution::{Continuous, InverseGamma, LogNormal, Normal, Uniform};

use common::{toy_dataset, trial};

/// Binomial pmf by direct counting of the coefficient.
fn pmf(r: u64, n: u64, p: f64) -> f64 {
    let mut c = 1.0;
    for k in 0..r {
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    c * p.powi(r as i32) * (1.0 - p).powi((n - r) as i32)
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

proptest! {
    #[test]
    fn likelihood_matches_pmf_product(
        nt in 1u64..=5, nc in 1u64..=5, et in 0u64..=5, ec in 0u64..=5,
        mu in -3.0f64..3.0, theta in -3.0f64..3.0,
    ) {
        let (et, ec) = (et.min(nt), ec.min(nc));
        let t = trial("m", "t", [et, nt, ec, nc], [false; 3], OutcomeType::Mortality);
        let direct = (pmf(ec, nc, expit(mu)) * pmf(et, nt, expit(mu + theta))).ln();
        let got = log_likelihood_trial(&t, mu, theta);
        prop_assert!((got - direct).abs() < 1e-10, "{} vs {}", got, direct);
    }
}

fn toy_state(spec: &ModelSpec) -> ParameterState {
    let n_terms = spec.n_terms();
    ParameterState {
        d: vec![-0.3, 0.1],
        tau2: vec![0.05, 0.12],
        bias: vec![
            (0..n_terms).map(|t| 0.1 - 0.05 * t as f64).collect(),
            (0..n_terms).map(|t| -0.2 + 0.07 * t as f64).collect(),
        ],
        b0: (0..n_terms).map(|t| -0.1 + 0.02 * t as f64).collect(),
        phi2: (0..n_terms).map(|t| 0.01 + 0.01 * t as f64).collect(),
        lambda: (0..n_terms).map(|t| 0.8 + 0.3 * t as f64).collect(),
        theta: vec![-0.4, 0.2, -0.1, 0.3, 0.05, -0.6, 0.4, -0.2],
        mu: vec![-1.9, -1.5, -1.6, -1.4, -2.0, -1.3, -2.1, -1.7],
        mu_tau: -2.5,
        beta: vec![0.3, -0.2][..spec.n_covariates()].to_vec(),
        sigma_tau: 0.7,
    }
}

/// Independent sum of prior densities using statrs distributions.
fn hand_summed_prior(spec: &ModelSpec, s: &ParameterState, include_lambda: bool) -> f64 {
    let norm = |x: f64, m: f64, var: f64| Normal::new(m, var.sqrt()).unwrap().ln_pdf(x);
    let flags = [
        [false, false, false],
        [true, false, true],
        [false, true, false],
        [true, true, true],
        [true, false, false],
        [false, true, true],
        [false, false, false],
        [true, true, true],
    ];
    let outcome_x = [[0.0, 0.0], [0.0, 1.0]];
    let terms = spec.terms();
    let pos: Vec<usize> = spec
        .characteristics
        .iter()
        .map(|c| robhet::model::Characteristic::ALL.iter().position(|a| a == c).unwrap())
        .collect();

    let mut lp = Uniform::new(0.0, 2.0).unwrap().ln_pdf(s.sigma_tau);
    lp += norm(s.mu_tau, 0.0, 1000.0);
    for b in &s.beta {
        lp += norm(*b, 0.0, 1000.0);
    }
    for t in 0..terms.len() {
        lp += norm(s.b0[t], 0.0, 1000.0);
        lp += InverseGamma::new(0.001, 0.001).unwrap().ln_pdf(s.phi2[t]);
        if include_lambda {
            lp += LogNormal::new(0.0, 1.0).unwrap().ln_pdf(s.lambda[t]);
        }
    }
    for (m, x_m) in outcome_x.iter().enumerate() {
        lp += norm(s.d[m], 0.0, 1000.0);
        let mut loc = s.mu_tau;
        for (x, b) in x_m.iter().zip(&s.beta) {
            loc += x * b;
        }
        lp += LogNormal::new(loc, s.sigma_tau).unwrap().ln_pdf(s.tau2[m]);
        for t in 0..terms.len() {
            lp += norm(s.bias[m][t], s.b0[t], s.phi2[t]);
        }
        for i in 0..4 {
            let k = 4 * m + i;
            let mut mask = 0u8;
            for (j, &p) in pos.iter().enumerate() {
                if flags[k][p] {
                    mask |= 1 << j;
                }
            }
            let mut mean = s.d[m];
            let mut var = s.tau2[m];
            for (t, term) in terms.iter().enumerate() {
                if term.mask() & mask == term.mask() {
                    mean += s.bias[m][t];
                    var *= s.lambda[t];
                }
            }
            lp += norm(s.theta[k], mean, var);
            lp += norm(s.mu[k], 0.0, 1000.0);
        }
    }
    lp
}

#[test]
fn log_prior_equals_hand_summed_densities() {
    let ds = toy_dataset();
    for name in ["A1", "B2", "B4"] {
        let spec = ModelSpec::preset(name).unwrap();
        let s = toy_state(&spec);
        let got = log_prior(&s, &spec, &ds).unwrap();
        let want = hand_summed_prior(&spec, &s, true);
        assert!((got - want).abs() < 1e-9, "{name}: {got} vs {want}");
    }
    let mut spec = ModelSpec::preset("B1").unwrap();
    spec.tau2_covariates = Tau2Covariates::OutcomeType;
    let s = toy_state(&spec);
    let got = log_prior(&s, &spec, &ds).unwrap();
    assert!((got - hand_summed_prior(&spec, &s, true)).abs() < 1e-9);
}

#[test]
fn log_prior_support_and_lambda_term() {
    let ds = toy_dataset();
    let spec = ModelSpec::preset("A1").unwrap();
    let mut s = toy_state(&spec);
    s.sigma_tau = 2.5;
    assert_eq!(log_prior(&s, &spec, &ds).unwrap(), f64::NEG_INFINITY);

    // lambda = 1 contributes the standard normal log density at 0
    let mut s = toy_state(&spec);
    s.lambda = vec![1.0];
    let contribution = log_prior(&s, &spec, &ds).unwrap() - hand_summed_prior(&spec, &s, false);
    assert!((contribution + (2.0 * std::f64::consts::PI).sqrt().ln()).abs() < 1e-9);

    let mut s = toy_state(&spec);
    s.phi2[0] = 0.0;
    assert_eq!(log_prior(&s, &spec, &ds).unwrap(), f64::NEG_INFINITY);
    let mut s = toy_state(&spec);
    s.theta.pop();
    assert!(log_prior(&s, &spec, &ds).is_err());
}

#[test]
fn total_likelihood_is_sum_over_trials() {
    let ds = toy_dataset();
    let s = toy_state(&ModelSpec::preset("A1").unwrap());
    let direct: f64 = ds
        .trials()
        .enumerate()
        .map(|(i, t)| {
            (pmf(t.events_ctrl, t.n_ctrl, expit(s.mu[i])) * pmf(t.events_treat, t.n_treat, expit(s.mu[i] + s.theta[i])))
                .ln()
        })
        .sum();
    assert!((log_likelihood(&s, &ds) - direct).abs() < 1e-8);
}
