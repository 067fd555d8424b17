//! Synthetic meta-epidemiological datasets with known truth, and a Monte
//! Carlo oracle for the total heterogeneity variance.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{filter_eligible, Dataset, MetaAnalysis, OutcomeType, RobJudgment, TrialRecord};
use crate::decompose::{cell_moments, DecompositionInput};
use crate::error::{Error, Result};
use crate::mcmc::{names, PosteriorSamples};
use crate::model::{cell_mean, cell_variance, BiasCell, Characteristic, ModelSpec};
use crate::stats::expit;

const MAX_FLAG_ATTEMPTS: usize = 100;
const MIN_ORACLE_DRAWS: usize = 10_000;

/// Hyperparameters the data are generated from. Per-term maps are keyed by
/// term label (`"SG"`, `"SG:AC"`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub lambdas: IndexMap<String, f64>,
    pub b0s: IndexMap<String, f64>,
    /// Between-meta standard deviation of each bias term.
    pub phis: IndexMap<String, f64>,
    pub mu_tau: f64,
    pub sigma_tau: f64,
    pub baseline_logodds_mean: f64,
    pub baseline_logodds_sd: f64,
    pub d_mean: f64,
    pub d_sd: f64,
}

impl SimTruth {
    /// Same `lambda`, `b0` and `phi` for every term of `spec`; median
    /// `tau2 = 0.04`.
    pub fn uniform(spec: &ModelSpec, lambda: f64, b0: f64, phi: f64) -> Self {
        let labels: Vec<String> = spec.terms().into_iter().map(|t| spec.term_label(t)).collect();
        let fill = |v: f64| labels.iter().map(|l| (l.clone(), v)).collect();
        Self {
            lambdas: fill(lambda),
            b0s: fill(b0),
            phis: fill(phi),
            mu_tau: 0.04f64.ln(),
            sigma_tau: 0.5,
            baseline_logodds_mean: -1.5,
            baseline_logodds_sd: 0.8,
            d_mean: -0.1,
            d_sd: 0.3,
        }
    }

    fn term_values(&self, spec: &ModelSpec) -> Result<[Vec<f64>; 3]> {
        let labels: Vec<String> = spec.terms().into_iter().map(|t| spec.term_label(t)).collect();
        let pick = |map: &IndexMap<String, f64>, what: &str| -> Result<Vec<f64>> {
            if map.len() != labels.len() {
                return Err(Error::Dimension(format!(
                    "truth has {} {what} values, model has {} terms",
                    map.len(),
                    labels.len()
                )));
            }
            labels
                .iter()
                .map(|l| {
                    map.get(l)
                        .copied()
                        .ok_or_else(|| Error::MissingParameter(format!("truth {what} for term {l}")))
                })
                .collect()
        };
        Ok([
            pick(&self.lambdas, "lambda")?,
            pick(&self.b0s, "b0")?,
            pick(&self.phis, "phi")?,
        ])
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let [lambdas, b0s, phis] = self.term_values(spec)?;
        let finite = |v: f64| v.is_finite();
        if !lambdas.iter().all(|&l| l > 0.0 && finite(l)) {
            return Err(Error::Domain("truth lambdas must be positive".into()));
        }
        if !phis.iter().all(|&p| p >= 0.0 && finite(p)) || !b0s.iter().all(|&b| finite(b)) {
            return Err(Error::Domain("truth phis must be nonnegative and b0s finite".into()));
        }
        if !(self.sigma_tau >= 0.0 && self.baseline_logodds_sd >= 0.0 && self.d_sd >= 0.0) {
            return Err(Error::Domain("truth standard deviations must be nonnegative".into()));
        }
        if ![self.mu_tau, self.sigma_tau, self.baseline_logodds_mean, self.d_mean]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Domain("truth hyperparameters must be finite".into()));
        }
        Ok(())
    }
}

/// Count distribution: with probability 1/2 log-uniform on `[min, median]`,
/// otherwise log-uniform on `[median, max]`, rounded to the nearest integer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub min: u64,
    pub median: u64,
    pub max: u64,
}

impl CountDistribution {
    pub fn new(min: u64, median: u64, max: u64) -> Self {
        Self { min, median, max }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.min >= 1 && self.min <= self.median && self.median <= self.max {
            Ok(())
        } else {
            Err(Error::Simulation(format!(
                "{what} needs 1 <= min <= median <= max, got {}/{}/{}",
                self.min, self.median, self.max
            )))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let (lo, hi) = if rng.random::<f64>() < 0.5 {
            (self.min, self.median)
        } else {
            (self.median, self.max)
        };
        let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
        let x = (a + (b - a) * rng.random::<f64>()).exp().round() as u64;
        x.clamp(lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimShape {
    pub n_metas: usize,
    pub trials_per_meta: CountDistribution,
    /// Participants per arm.
    pub n_per_arm: CountDistribution,
    /// Probability of a high/unclear judgment for SG, AC, BL.
    pub prob_high_or_unclear: [f64; 3],
    /// Probability that a trial's three flags share one uniform draw.
    pub flag_correlation: f64,
    /// Proportions of mortality, objective and subjective outcomes.
    pub outcome_mix: [f64; 3],
}

impl Default for SimShape {
    fn default() -> Self {
        Self {
            n_metas: 50,
            trials_per_meta: CountDistribution::new(5, 10, 75),
            n_per_arm: CountDistribution::new(4, 60, 2000),
            prob_high_or_unclear: [0.6, 0.6, 0.5],
            flag_correlation: 0.0,
            outcome_mix: [0.18, 0.20, 0.62],
        }
    }
}

impl SimShape {
    pub fn validate(&self) -> Result<()> {
        if self.n_metas == 0 {
            return Err(Error::Simulation("n_metas must be at least 1".into()));
        }
        self.trials_per_meta.validate("trials_per_meta")?;
        self.n_per_arm.validate("n_per_arm")?;
        let unit = |p: &f64| (0.0..=1.0).contains(p);
        if !self.prob_high_or_unclear.iter().all(unit) || !unit(&self.flag_correlation) {
            return Err(Error::Simulation("probabilities must lie in [0, 1]".into()));
        }
        let total: f64 = self.outcome_mix.iter().sum();
        if !self.outcome_mix.iter().all(|p| *p >= 0.0) || !(total > 0.0) {
            return Err(Error::Simulation(
                "outcome_mix must be nonnegative with positive sum".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTruth {
    pub meta_id: String,
    pub d: f64,
    pub tau2: f64,
    pub biases: IndexMap<String, f64>,
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
}

/// Hidden values behind a generated dataset; written as a JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub seed: u64,
    pub spec: ModelSpec,
    pub truth: SimTruth,
    pub shape: SimShape,
    pub metas: Vec<MetaTruth>,
}

impl TruthRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).expect("finite normal parameters").sample(rng)
}

fn draw_flags<R: Rng + ?Sized>(rng: &mut R, shape: &SimShape) -> [bool; 3] {
    let shared: f64 = rng.random();
    let mut flags = [false; 3];
    for (j, flag) in flags.iter_mut().enumerate() {
        let u = if rng.random::<f64>() < shape.flag_correlation {
            shared
        } else {
            rng.random()
        };
        *flag = u < shape.prob_high_or_unclear[j];
    }
    flags
}

fn draw_outcome<R: Rng + ?Sized>(rng: &mut R, mix: &[f64; 3]) -> OutcomeType {
    let total: f64 = mix.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (o, &p) in OutcomeType::ALL.iter().zip(mix) {
        if u < p {
            return *o;
        }
        u -= p;
    }
    OutcomeType::ALL[2]
}

/// Draws a dataset from the generative model. Meta `m` uses its own
/// generator seeded with `seed ^ m`.
pub fn generate_dataset(
    truth: &SimTruth,
    shape: &SimShape,
    spec: &ModelSpec,
    seed: u64,
) -> Result<(Dataset, TruthRecord)> {
    spec.validate()?;
    shape.validate()?;
    truth.validate(spec)?;
    let [lambdas, b0s, phis] = truth.term_values(spec)?;
    let labels: Vec<String> = spec.terms().into_iter().map(|t| spec.term_label(t)).collect();
    let char_index: Vec<usize> = spec
        .characteristics
        .iter()
        .map(|c| {
            Characteristic::ALL
                .iter()
                .position(|a| a == c)
                .expect("known characteristic")
        })
        .collect();
    let width = shape.n_metas.to_string().len().max(3);

    let mut metas = Vec::with_capacity(shape.n_metas);
    let mut truths = Vec::with_capacity(shape.n_metas);
    for m in 0..shape.n_metas {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ m as u64);
        let meta_id = format!("m{:0width$}", m + 1);
        let outcome = draw_outcome(&mut rng, &shape.outcome_mix);
        let d = normal(&mut rng, truth.d_mean, truth.d_sd);
        let tau2 = normal(&mut rng, truth.mu_tau, truth.sigma_tau).exp();
        let biases: Vec<f64> = b0s
            .iter()
            .zip(&phis)
            .map(|(&b0, &phi)| normal(&mut rng, b0, phi))
            .collect();
        let n_trials = shape.trials_per_meta.sample(&mut rng) as usize;

        let mut flags = Vec::new();
        let mut eligible = false;
        for _ in 0..MAX_FLAG_ATTEMPTS {
            flags = (0..n_trials).map(|_| draw_flags(&mut rng, shape)).collect::<Vec<_>>();
            eligible = char_index.iter().all(|&j| {
                let n = flags.iter().filter(|f| f[j]).count();
                n > 0 && n < n_trials
            });
            if eligible {
                break;
            }
        }
        if !eligible {
            return Err(Error::Simulation(format!(
                "could not draw eligible risk-of-bias flags for {meta_id} in {MAX_FLAG_ATTEMPTS} attempts"
            )));
        }

        let mut trials = Vec::with_capacity(n_trials);
        let mut thetas = Vec::with_capacity(n_trials);
        let mut mus = Vec::with_capacity(n_trials);
        for (k, f) in flags.iter().enumerate() {
            let cell = BiasCell::from_flags(&char_index.iter().map(|&j| f[j]).collect::<Vec<_>>());
            let mean = cell_mean(d, &biases, cell, spec)?;
            let var = cell_variance(tau2, &lambdas, cell, spec)?;
            let theta = normal(&mut rng, mean, var.sqrt());
            let mu = normal(&mut rng, truth.baseline_logodds_mean, truth.baseline_logodds_sd);
            let n = shape.n_per_arm.sample(&mut rng);
            let binom = |p: f64, rng: &mut ChaCha20Rng| Binomial::new(n, p).expect("valid binomial").sample(rng);
            let events_ctrl = binom(expit(mu), &mut rng);
            let events_treat = binom(expit(mu + theta), &mut rng);
            let judgment = |flag: bool, rng: &mut ChaCha20Rng| match (flag, rng.random::<bool>()) {
                (false, _) => RobJudgment::Low,
                (true, true) => RobJudgment::High,
                (true, false) => RobJudgment::Unclear,
            };
            trials.push(TrialRecord {
                meta_id: meta_id.clone(),
                trial_id: format!("{meta_id}-t{:02}", k + 1),
                events_treat,
                n_treat: n,
                events_ctrl,
                n_ctrl: n,
                rob_sg: judgment(f[0], &mut rng),
                rob_ac: judgment(f[1], &mut rng),
                rob_bl: judgment(f[2], &mut rng),
                outcome,
            });
            thetas.push(theta);
            mus.push(mu);
        }
        metas.push(MetaAnalysis::new(trials)?);
        truths.push(MetaTruth {
            meta_id,
            d,
            tau2,
            biases: labels.iter().cloned().zip(biases).collect(),
            theta: thetas,
            mu: mus,
        });
    }
    let ds = Dataset::new(metas)?;
    debug_assert!(filter_eligible(&ds, &spec.characteristics).1.is_empty());
    Ok((
        ds,
        TruthRecord {
            seed,
            spec: spec.clone(),
            truth: truth.clone(),
            shape: shape.clone(),
            metas: truths,
        },
    ))
}

/// Sample variance of `n_draws` effects drawn from the cell mixture of
/// `input`, with its jackknife standard error.
pub fn mc_variance_oracle(
    input: &DecompositionInput,
    spec: &ModelSpec,
    n_draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_draws < MIN_ORACLE_DRAWS {
        return Err(Error::InsufficientData(format!(
            "mc_variance_oracle needs at least {MIN_ORACLE_DRAWS} draws, got {n_draws}"
        )));
    }
    let cells = cell_moments(input, spec)?;
    let mut cumulative = Vec::with_capacity(cells.len());
    let mut acc = 0.0;
    for (w, _, _) in &cells {
        acc += w;
        cumulative.push(acc);
    }
    let sds: Vec<f64> = cells.iter().map(|(_, _, v)| v.sqrt()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..n_draws)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let c = cumulative.iter().position(|&c| u < c).unwrap_or(cells.len() - 1);
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            cells[c].1 + sds[c] * z
        })
        .collect();
    Ok(variance_with_jackknife(&draws))
}

/// Sample variance and the jackknife standard error of it, in O(n).
pub fn variance_with_jackknife(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    // centring keeps the leave-one-out sums accurate
    let c: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let s1: f64 = c.iter().sum();
    let s2: f64 = c.iter().map(|x| x * x).sum();
    let var = (s2 - s1 * s1 / n) / (n - 1.0);
    let loo: Vec<f64> = c
        .iter()
        .map(|x| {
            let (a, b) = (s1 - x, s2 - x * x);
            (b - a * a / (n - 1.0)) / (n - 2.0)
        })
        .collect();
    let loo_mean = loo.iter().sum::<f64>() / n;
    let jack_var = (n - 1.0) / n * loo.iter().map(|v| (v - loo_mean).powi(2)).sum::<f64>();
    (var, jack_var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecovery {
    pub name: String,
    pub truth: f64,
    pub median: f64,
    pub lower95: f64,
    pub upper95: f64,
    pub covered: bool,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub params: Vec<ParamRecovery>,
    /// Fraction of parameters whose 95% interval covers the truth.
    pub coverage: f64,
}

impl RecoveryMetrics {
    pub fn get(&self, name: &str) -> Option<&ParamRecovery> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Compares posterior summaries of the global parameters with the truth:
/// every `lambda`, `b0` and `phi2` (truth `phi^2`), `mu_tau` and `sigma_tau`.
pub fn recovery_report(truth: &SimTruth, fit: &PosteriorSamples) -> Result<RecoveryMetrics> {
    let mut targets: Vec<(String, f64)> = Vec::new();
    targets.extend(truth.lambdas.iter().map(|(l, v)| (names::lambda(l), *v)));
    targets.extend(truth.b0s.iter().map(|(l, v)| (names::b0(l), *v)));
    targets.extend(truth.phis.iter().map(|(l, v)| (names::phi2(l), v * v)));
    targets.push((names::MU_TAU.into(), truth.mu_tau));
    targets.push((names::SIGMA_TAU.into(), truth.sigma_tau));
    let params = targets
        .into_iter()
        .map(|(name, t)| {
            let s = fit
                .summary(&name)
                .ok_or_else(|| Error::MissingParameter(format!("fit has no parameter {name}")))?;
            Ok(ParamRecovery {
                covered: s.lower95 <= t && t <= s.upper95,
                abs_error: (s.median - t).abs(),
                name,
                truth: t,
                median: s.median,
                lower95: s.lower95,
                upper95: s.upper95,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let coverage = params.iter().filter(|p| p.covered).count() as f64 / params.len() as f64;
    Ok(RecoveryMetrics { params, coverage })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{total_variance_univariable, CellWeights};

    fn a1() -> ModelSpec {
        ModelSpec::preset("A1").unwrap()
    }

    #[test]
    fn count_distribution_respects_bounds() {
        let d = CountDistribution::new(5, 10, 75);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let xs: Vec<u64> = (0..4000).map(|_| d.sample(&mut rng)).collect();
        assert!(xs.iter().all(|&x| (5..=75).contains(&x)));
        let below = xs.iter().filter(|&&x| x < 10).count() as f64 / xs.len() as f64;
        assert!((below - 0.5).abs() < 0.06, "{below}");
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = a1();
        let truth = SimTruth::uniform(&spec, 1.5, -0.2, 0.1);
        let shape = SimShape {
            n_metas: 6,
            ..SimShape::default()
        };
        let (a, ta) = generate_dataset(&truth, &shape, &spec, 11).unwrap();
        let (b, tb) = generate_dataset(&truth, &shape, &spec, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_dataset(&truth, &shape, &spec, 12).unwrap();
        assert_ne!(a, c);
        assert!(filter_eligible(&a, &spec.characteristics).1.is_empty());
    }

    #[test]
    fn impossible_flags_are_an_error() {
        let spec = a1();
        let truth = SimTruth::uniform(&spec, 1.0, 0.0, 0.1);
        let mut shape = SimShape {
            n_metas: 2,
            ..SimShape::default()
        };
        shape.prob_high_or_unclear[0] = 0.0;
        assert!(matches!(
            generate_dataset(&truth, &shape, &spec, 1),
            Err(Error::Simulation(_))
        ));
    }

    #[test]
    fn truth_must_match_terms() {
        let spec = a1();
        let truth = SimTruth::uniform(&ModelSpec::preset("B4").unwrap(), 1.0, 0.0, 0.1);
        assert!(generate_dataset(&truth, &SimShape::default(), &spec, 1).is_err());
    }

    #[test]
    fn jackknife_matches_brute_force() {
        let xs = [0.3, -1.2, 2.5, 0.0, 0.7, 1.1, -0.4];
        let (v, se) = variance_with_jackknife(&xs);
        let var = |s: &[f64]| crate::stats::sample_variance(s);
        assert!((v - var(&xs)).abs() < 1e-12);
        let loo: Vec<f64> = (0..xs.len())
            .map(|i| {
                let rest: Vec<f64> = xs
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, x)| *x)
                    .collect();
                var(&rest)
            })
            .collect();
        let n = xs.len() as f64;
        let m = loo.iter().sum::<f64>() / n;
        let brute = ((n - 1.0) / n * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt();
        assert!((se - brute).abs() < 1e-12);
    }

    #[test]
    fn oracle_matches_univariable_example() {
        let spec = a1();
        let input = DecompositionInput {
            tau2: 0.04,
            lambdas: vec![2.0],
            biases: vec![0.2],
            d: 0.0,
            weights: CellWeights::Marginal(vec![0.5]),
        };
        let exact = total_variance_univariable(0.04, 2.0, 0.2, 0.5).unwrap();
        let (v, se) = mc_variance_oracle(&input, &spec, 200_000, 5).unwrap();
        assert!((v - exact).abs() < 4.0 * se, "{v} vs {exact} (se {se})");
        assert!(mc_variance_oracle(&input, &spec, 9_999, 5).is_err());
    }
}
