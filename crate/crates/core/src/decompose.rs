//! Total heterogeneity variance and the proportion explained by bias.
//!
//! A trial's true effect is a mixture over bias cells: the cell is drawn with
//! weight `w(c)` and the effect is normal with the cell's mean and variance.
//! By the law of total variance
//!
//! ```text
//! tau2_total = sum_c w(c) var(c) + sum_c w(c) (mean(c) - mbar)^2,   mbar = sum_c w(c) mean(c)
//! ```
//!
//! The one- and two-characteristic closed forms are kept as separate
//! functions and used to cross-check the general form.

use serde::Serialize;

use crate::dataset::{empirical_proportions, Dataset};
use crate::error::{Error, Result};
use crate::mcmc::{names, PosteriorSamples};
use crate::model::{cell_mean, cell_variance, BiasCell, CellWeighting, ModelSpec};
use crate::stats;

/// Either independent marginal proportions (one per characteristic) or a full
/// joint distribution over the `2^K` cells indexed by flag mask.
#[derive(Debug, Clone, PartialEq)]
pub enum CellWeights {
    Marginal(Vec<f64>),
    Joint(Vec<f64>),
}

impl CellWeights {
    pub fn resolve(&self, k: usize) -> Result<Vec<f64>> {
        match self {
            CellWeights::Marginal(pis) => {
                if pis.len() != k {
                    return Err(Error::Dimension(format!(
                        "expected {k} marginal proportions, got {}",
                        pis.len()
                    )));
                }
                if let Some(p) = pis.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::Domain(format!("proportion {p} outside [0, 1]")));
                }
                Ok(BiasCell::all(k)
                    .map(|cell| {
                        pis.iter()
                            .enumerate()
                            .map(|(j, &p)| if cell.is_flagged(j) { p } else { 1.0 - p })
                            .product()
                    })
                    .collect())
            }
            CellWeights::Joint(w) => {
                if w.len() != 1 << k {
                    return Err(Error::Dimension(format!(
                        "expected {} joint cell weights, got {}",
                        1 << k,
                        w.len()
                    )));
                }
                if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                    return Err(Error::Domain("joint cell weights must be nonnegative".into()));
                }
                let total: f64 = w.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Domain(format!("joint cell weights sum to {total}, not 1")));
                }
                Ok(w.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionInput {
    pub tau2: f64,
    /// Aligned with `spec.terms()`.
    pub lambdas: Vec<f64>,
    /// Aligned with `spec.terms()`.
    pub biases: Vec<f64>,
    pub d: f64,
    pub weights: CellWeights,
}

/// Weight, mean and variance of every cell.
pub fn cell_moments(input: &DecompositionInput, spec: &ModelSpec) -> Result<Vec<(f64, f64, f64)>> {
    let w = input.weights.resolve(spec.k())?;
    BiasCell::all(spec.k())
        .zip(w)
        .map(|(cell, w)| {
            Ok((
                w,
                cell_mean(input.d, &input.biases, cell, spec)?,
                cell_variance(input.tau2, &input.lambdas, cell, spec)?,
            ))
        })
        .collect()
}

/// Law-of-total-variance heterogeneity over all `2^K` cells.
pub fn total_variance_general(input: &DecompositionInput, spec: &ModelSpec) -> Result<f64> {
    let cells = cell_moments(input, spec)?;
    let mbar: f64 = cells.iter().map(|(w, m, _)| w * m).sum();
    let within: f64 = cells.iter().map(|(w, _, v)| w * v).sum();
    let between: f64 = cells.iter().map(|(w, m, _)| w * (m - mbar).powi(2)).sum();
    Ok(within + between)
}

fn check_scale(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive, got {v}")))
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must lie in [0, 1], got {p}")))
    }
}

/// `(1 - pi) tau2 + pi lambda tau2 + pi (1 - pi) b^2`.
pub fn total_variance_univariable(tau2: f64, lambda: f64, b: f64, pi: f64) -> Result<f64> {
    check_scale("tau2", tau2)?;
    check_scale("lambda", lambda)?;
    check_prob("pi", pi)?;
    Ok((1.0 - pi) * tau2 + pi * lambda * tau2 + pi * (1.0 - pi) * b * b)
}

/// Two-characteristic closed form with independent flags, written out term
/// by term: four cell contributions and six cross-cell covariance corrections.
/// `lambdas` and `biases` are (characteristic 1, characteristic 2, interaction).
pub fn total_variance_bivariable(
    tau2: f64,
    lambdas: [f64; 3],
    biases: [f64; 3],
    d: f64,
    pi1: f64,
    pi2: f64,
) -> Result<f64> {
    check_scale("tau2", tau2)?;
    for l in lambdas {
        check_scale("lambda", l)?;
    }
    check_prob("pi1", pi1)?;
    check_prob("pi2", pi2)?;
    let [l1, l2, l3] = lambdas;
    let [b1, b2, b3] = biases;
    let (q1, q2) = (1.0 - pi1, 1.0 - pi2);
    let m0 = d;
    let m1 = d + b1;
    let m2 = d + b2;
    let m3 = d + b1 + b2 + b3;

    let mut v = q1 * q2 * tau2 + (q1 * q2 - q1 * q1 * q2 * q2) * m0 * m0;
    v += pi1 * q2 * l1 * tau2 + (pi1 * q2 - pi1 * pi1 * q2 * q2) * m1 * m1;
    v += pi2 * q1 * l2 * tau2 + (pi2 * q1 - pi2 * pi2 * q1 * q1) * m2 * m2;
    v += pi1 * pi2 * l1 * l2 * l3 * tau2 + (pi1 * pi2 - pi1 * pi1 * pi2 * pi2) * m3 * m3;
    v -= 2.0 * pi1 * q1 * q2 * q2 * m0 * m1;
    v -= 2.0 * pi2 * q2 * q1 * q1 * m0 * m2;
    v -= 2.0 * pi1 * pi2 * q1 * q2 * m0 * m3;
    v -= 2.0 * pi1 * q2 * pi2 * q1 * m1 * m2;
    v -= 2.0 * pi1 * pi1 * q2 * pi2 * m1 * m3;
    v -= 2.0 * pi2 * pi2 * q1 * pi1 * m2 * m3;
    Ok(v)
}

/// `1 - tau2 / tau2_total`, clamped to `[0, 1]`.
pub fn proportion_explained(tau2: f64, tau2_total: f64) -> Result<f64> {
    Ok(unclamped_proportion(tau2, tau2_total)?.clamp(0.0, 1.0))
}

fn unclamped_proportion(tau2: f64, tau2_total: f64) -> Result<f64> {
    check_scale("tau2", tau2)?;
    check_scale("tau2_total", tau2_total)?;
    Ok(1.0 - tau2 / tau2_total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossMetaSummary {
    pub median: f64,
    pub lower95: f64,
    pub upper95: f64,
}

pub fn cross_meta_summary(values: &[f64]) -> Result<CrossMetaSummary> {
    if values.is_empty() {
        return Err(Error::InsufficientData("no meta-analyses to summarize".into()));
    }
    let s = stats::sorted(values);
    Ok(CrossMetaSummary {
        median: stats::quantile_sorted(&s, 0.5),
        lower95: stats::quantile_sorted(&s, 0.025),
        upper95: stats::quantile_sorted(&s, 0.975),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetaDecomposition {
    pub meta_id: String,
    pub tau2_median: f64,
    pub tau2_total_median: f64,
    /// Median over draws of the per-draw clamped proportion.
    pub proportion_explained: f64,
    /// Median over draws of the raw `1 - tau2 / tau2_total`.
    pub proportion_unclamped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionResult {
    pub weighting: CellWeighting,
    pub metas: Vec<MetaDecomposition>,
    pub summary: CrossMetaSummary,
}

fn pooled(samples: &PosteriorSamples, name: &str) -> Result<Vec<f64>> {
    samples
        .pooled(name)
        .ok_or_else(|| Error::MissingParameter(name.to_string()))
}

/// Per-meta posterior medians of `tau2`, `tau2_total` and the clamped
/// proportion explained, using each draw's parameters and the
/// meta-analysis's empirical risk-of-bias proportions.
pub fn per_meta_decomposition(
    samples: &PosteriorSamples,
    ds: &Dataset,
    spec: &ModelSpec,
) -> Result<DecompositionResult> {
    let terms = spec.terms();
    let labels: Vec<String> = terms.iter().map(|&t| spec.term_label(t)).collect();
    let lambda_draws = labels
        .iter()
        .map(|l| pooled(samples, &names::lambda(l)))
        .collect::<Result<Vec<_>>>()?;

    let mut metas = Vec::with_capacity(ds.metas().len());
    for meta in ds.metas() {
        let id = meta.meta_id();
        let tau2 = pooled(samples, &names::tau2(id))?;
        let d = pooled(samples, &names::d(id))?;
        let bias = labels
            .iter()
            .map(|l| pooled(samples, &names::bias(l, id)))
            .collect::<Result<Vec<_>>>()?;

        let props = empirical_proportions(meta, &spec.characteristics);
        let weights = match spec.cell_weighting {
            CellWeighting::MarginalIndependent => CellWeights::Marginal(props.marginals),
            CellWeighting::EmpiricalJoint => CellWeights::Joint(props.joint),
        };

        let n = tau2.len();
        let mut totals = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        for s in 0..n {
            let input = DecompositionInput {
                tau2: tau2[s],
                lambdas: lambda_draws.iter().map(|l| l[s]).collect(),
                biases: bias.iter().map(|b| b[s]).collect(),
                d: d[s],
                weights: weights.clone(),
            };
            let total = total_variance_general(&input, spec)?;
            let r = unclamped_proportion(tau2[s], total)?;
            totals.push(total);
            raw.push(r);
            clamped.push(r.clamp(0.0, 1.0));
        }
        metas.push(MetaDecomposition {
            meta_id: id.to_string(),
            tau2_median: stats::median(&tau2),
            tau2_total_median: stats::median(&totals),
            proportion_explained: stats::median(&clamped),
            proportion_unclamped: stats::median(&raw),
        });
    }

    let props: Vec<f64> = metas.iter().map(|m| m.proportion_explained).collect();
    Ok(DecompositionResult {
        weighting: spec.cell_weighting,
        summary: cross_meta_summary(&props)?,
        metas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure1Point {
    pub meta_id: String,
    pub tau2_median: f64,
    pub tau2_total_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Figure1Data {
    pub points: Vec<Figure1Point>,
    /// Meta-analyses whose low-risk heterogeneity is below the total.
    pub n_below_total: usize,
}

pub fn figure1_data(result: &DecompositionResult) -> Figure1Data {
    let points: Vec<Figure1Point> = result
        .metas
        .iter()
        .map(|m| Figure1Point {
            meta_id: m.meta_id.clone(),
            tau2_median: m.tau2_median,
            tau2_total_median: m.tau2_total_median,
        })
        .collect();
    let n_below_total = points.iter().filter(|p| p.tau2_median < p.tau2_total_median).count();
    Figure1Data { points, n_below_total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Characteristic::*;

    #[test]
    fn univariable_examples() {
        for pi in [0.0, 0.2, 0.5, 1.0] {
            assert_eq!(total_variance_univariable(0.04, 1.0, 0.0, pi).unwrap(), 0.04);
        }
        assert_eq!(total_variance_univariable(0.04, 2.0, 0.3, 0.0).unwrap(), 0.04);
        assert_eq!(total_variance_univariable(0.04, 2.0, 0.3, 1.0).unwrap(), 0.08);
        assert!((total_variance_univariable(0.04, 2.0, 0.2, 0.5).unwrap() - 0.07).abs() < 1e-15);
        assert!(total_variance_univariable(0.0, 1.0, 0.0, 0.5).is_err());
        assert!(total_variance_univariable(0.04, 1.0, 0.0, 1.5).is_err());
    }

    #[test]
    fn bivariable_examples() {
        let v = total_variance_bivariable(0.04, [1.0; 3], [0.0; 3], 0.8, 0.5, 0.5).unwrap();
        assert!((v - 0.04).abs() < 1e-15);
        let v = total_variance_bivariable(0.04, [1.0; 3], [0.2, 0.0, 0.0], 0.0, 0.5, 0.5).unwrap();
        assert!((v - 0.05).abs() < 1e-15);
        let a = total_variance_bivariable(0.03, [1.3, 0.6, 2.0], [0.2, -0.4, 0.1], 0.0, 0.3, 0.7).unwrap();
        let b = total_variance_bivariable(0.03, [1.3, 0.6, 2.0], [0.2, -0.4, 0.1], 7.0, 0.3, 0.7).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn general_form_single_cell_weight() {
        let spec = ModelSpec::preset("B1").unwrap();
        let input = DecompositionInput {
            tau2: 0.05,
            lambdas: vec![2.0, 0.5, 3.0],
            biases: vec![0.1, 0.2, 0.3],
            d: -0.4,
            weights: CellWeights::Joint(vec![0.0, 0.0, 0.0, 1.0]),
        };
        let v = total_variance_general(&input, &spec).unwrap();
        assert!((v - 0.05 * 2.0 * 0.5 * 3.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let spec = ModelSpec::new(vec![SG, BL], true).unwrap();
        let mut input = DecompositionInput {
            tau2: 0.05,
            lambdas: vec![1.0; 3],
            biases: vec![0.0; 3],
            d: 0.0,
            weights: CellWeights::Joint(vec![0.5, 0.5, 0.5, 0.0]),
        };
        assert!(total_variance_general(&input, &spec).is_err());
        input.weights = CellWeights::Marginal(vec![0.5]);
        assert!(total_variance_general(&input, &spec).is_err());
        input.weights = CellWeights::Marginal(vec![0.5, -0.1]);
        assert!(total_variance_general(&input, &spec).is_err());
    }

    #[test]
    fn proportion_examples() {
        assert_eq!(proportion_explained(0.05, 0.04).unwrap(), 0.0);
        assert!((proportion_explained(0.04, 0.07).unwrap() - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(proportion_explained(0.04, 0.04).unwrap(), 0.0);
        assert!(proportion_explained(0.0, 0.04).is_err());
        assert!(proportion_explained(0.04, -1.0).is_err());
    }

    #[test]
    fn cross_meta_examples() {
        let s = cross_meta_summary(&[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        assert!((s.median - 0.5).abs() < 1e-15);
        assert!((s.lower95 - 0.025).abs() < 1e-15);
        assert!((s.upper95 - 0.975).abs() < 1e-15);
        let c = cross_meta_summary(&[0.3; 4]).unwrap();
        assert_eq!((c.median, c.lower95, c.upper95), (0.3, 0.3, 0.3));
        assert!(cross_meta_summary(&[]).is_err());
    }
}
