//! Fit summaries, results tables and the heterogeneity scatter plot.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::decompose::{DecompositionResult, Figure1Data};
use crate::error::{Error, Result};
use crate::mcmc::{dic, names, summarize_param, DicResult, PosteriorSamples, PosteriorSummary, RHAT_THRESHOLD};
use crate::model::{active_term_indices, BiasCell, ModelSpec, Tau2Covariates};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub median: f64,
    pub lower95: f64,
    pub upper95: f64,
    pub mc_error: Option<f64>,
    /// `null` for a single chain or an infinite value.
    pub r_hat: Option<f64>,
    /// `"median (lower to upper)"`.
    pub interval: String,
}

impl From<&PosteriorSummary> for SummaryEntry {
    fn from(s: &PosteriorSummary) -> Self {
        Self {
            median: s.median,
            lower95: s.lower95,
            upper95: s.upper95,
            mc_error: s.mc_error,
            r_hat: s.r_hat.filter(|r| r.is_finite()),
            interval: s.formatted(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub threshold: f64,
    pub r_hat: IndexMap<String, Option<f64>>,
    pub flagged: Vec<String>,
}

impl Convergence {
    pub fn from_samples(samples: &PosteriorSamples) -> Self {
        let r_hat = samples
            .monitored
            .iter()
            .map(|n| (n.clone(), samples.summary(n).and_then(|s| s.r_hat)))
            .collect();
        Self {
            converged: samples.converged(),
            threshold: RHAT_THRESHOLD,
            r_hat,
            flagged: samples.flagged.clone(),
        }
    }
}

/// Contents of a fit's `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub model: String,
    pub n_metas: usize,
    pub n_trials: usize,
    pub n_chains: usize,
    pub n_draws: usize,
    /// Keyed by term label.
    pub lambda: IndexMap<String, SummaryEntry>,
    pub b0: IndexMap<String, SummaryEntry>,
    pub phi2: IndexMap<String, SummaryEntry>,
    /// Heterogeneity ratio of each cell with two or more flagged
    /// characteristics versus the all-low cell: the product of the `lambda`
    /// of every term active in the cell. Keyed by cell label.
    pub lambda_cell: IndexMap<String, SummaryEntry>,
    pub mu_tau: SummaryEntry,
    pub sigma_tau: SummaryEntry,
    pub beta: IndexMap<String, SummaryEntry>,
    pub dic: DicResult,
    pub acceptance: IndexMap<String, f64>,
    pub convergence: Convergence,
}

impl FitSummary {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn entry(samples: &PosteriorSamples, name: &str) -> Result<SummaryEntry> {
    samples
        .summary(name)
        .map(SummaryEntry::from)
        .ok_or_else(|| Error::MissingParameter(name.to_string()))
}

/// Per-draw product of the `lambda` columns of `terms`, chain by chain.
fn lambda_product(samples: &PosteriorSamples, labels: &[&str]) -> Result<Vec<Vec<f64>>> {
    samples
        .chains
        .iter()
        .map(|c| {
            let mut prod = vec![1.0; c.len()];
            for l in labels {
                let name = names::lambda(l);
                let col = c.column(&name).ok_or(Error::MissingParameter(name))?;
                prod.iter_mut().zip(col).for_each(|(p, x)| *p *= x);
            }
            Ok(prod)
        })
        .collect()
}

pub fn fit_summary(model: &str, spec: &ModelSpec, ds: &Dataset, samples: &PosteriorSamples) -> Result<FitSummary> {
    let terms = spec.terms();
    let labels: Vec<String> = terms.iter().map(|&t| spec.term_label(t)).collect();
    let by_term = |f: fn(&str) -> String| -> Result<IndexMap<String, SummaryEntry>> {
        labels.iter().map(|l| Ok((l.clone(), entry(samples, &f(l))?))).collect()
    };

    let mut lambda_cell = IndexMap::new();
    for cell in BiasCell::all(spec.k()).filter(|c| c.mask().count_ones() >= 2) {
        let active: Vec<&str> = active_term_indices(cell, spec)?
            .into_iter()
            .map(|i| labels[i].as_str())
            .collect();
        let per_chain = lambda_product(samples, &active)?;
        let refs: Vec<&[f64]> = per_chain.iter().map(Vec::as_slice).collect();
        let s = summarize_param(&refs.concat(), &refs)?;
        lambda_cell.insert(spec.cell_label(cell), SummaryEntry::from(&s));
    }

    let beta = crate::mcmc::COVARIATE_NAMES[..spec.n_covariates()]
        .iter()
        .map(|c| Ok((c.to_string(), entry(samples, &names::beta(c))?)))
        .collect::<Result<IndexMap<_, _>>>()?;

    Ok(FitSummary {
        model: model.to_string(),
        n_metas: ds.metas().len(),
        n_trials: ds.n_trials(),
        n_chains: samples.chains.len(),
        n_draws: samples.n_draws(),
        lambda: by_term(names::lambda)?,
        b0: by_term(names::b0)?,
        phi2: by_term(names::phi2)?,
        lambda_cell,
        mu_tau: entry(samples, names::MU_TAU)?,
        sigma_tau: entry(samples, names::SIGMA_TAU)?,
        beta,
        dic: dic(samples, ds)?,
        acceptance: samples.acceptance(),
        convergence: Convergence::from_samples(samples),
    })
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn num(x: f64) -> String {
    x.to_string()
}

/// Posterior medians and 95% intervals of `lambda`, the combined cell
/// ratios, `b0` and `phi2` for each fit.
pub fn table3_csv(fits: &[&FitSummary]) -> Result<String> {
    let mut rows = Vec::new();
    for f in fits {
        let groups: [(&str, &IndexMap<String, SummaryEntry>); 4] = [
            ("lambda", &f.lambda),
            ("lambda_cell", &f.lambda_cell),
            ("b0", &f.b0),
            ("phi2", &f.phi2),
        ];
        for (param, map) in groups {
            for (label, e) in map {
                rows.push(vec![
                    f.model.clone(),
                    param.to_string(),
                    label.clone(),
                    num(e.median),
                    num(e.lower95),
                    num(e.upper95),
                    e.interval.clone(),
                ]);
            }
        }
    }
    csv_string(
        &[
            "model",
            "parameter",
            "label",
            "median",
            "lower95",
            "upper95",
            "estimate",
        ],
        rows,
    )
}

fn characteristics_label(spec: &ModelSpec) -> String {
    spec.characteristics
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join("/")
}

/// Cross-meta summaries of the per-meta proportion of heterogeneity explained.
pub fn table4_csv(rows: &[(&str, &ModelSpec, &DecompositionResult)]) -> Result<String> {
    let rows = rows
        .iter()
        .map(|(model, spec, r)| {
            let s = r.summary;
            vec![
                model.to_string(),
                characteristics_label(spec),
                match r.weighting {
                    crate::model::CellWeighting::MarginalIndependent => "marginal".into(),
                    crate::model::CellWeighting::EmpiricalJoint => "joint".into(),
                },
                r.metas.len().to_string(),
                num(s.median),
                num(s.lower95),
                num(s.upper95),
                format!(
                    "Median {:.2}; 95% interval {:.2} to {:.2}",
                    s.median, s.lower95, s.upper95
                ),
            ]
        })
        .collect();
    csv_string(
        &[
            "model",
            "characteristics",
            "weighting",
            "n_metas",
            "median",
            "lower95",
            "upper95",
            "summary",
        ],
        rows,
    )
}

/// Model comparison by residual deviance, effective parameters and DIC.
pub fn table_s1_csv(rows: &[(&str, &ModelSpec, &DicResult)]) -> Result<String> {
    let rows = rows
        .iter()
        .map(|(model, spec, d)| {
            vec![
                model.to_string(),
                characteristics_label(spec),
                if spec.k() == 1 {
                    "N/A".into()
                } else if spec.include_interactions {
                    "Yes".into()
                } else {
                    "No".into()
                },
                match spec.tau2_covariates {
                    Tau2Covariates::None => "-".into(),
                    Tau2Covariates::OutcomeType => "Outcome type".into(),
                },
                num(d.d_res_bar),
                num(d.p_d),
                num(d.dic),
            ]
        })
        .collect();
    csv_string(
        &[
            "model",
            "characteristics",
            "interactions",
            "tau2_covariates",
            "D_res",
            "p_D",
            "DIC",
        ],
        rows,
    )
}

pub fn figure1_csv(panels: &[(&str, &Figure1Data)]) -> Result<String> {
    let mut rows = Vec::new();
    for (model, data) in panels {
        for p in &data.points {
            rows.push(vec![
                model.to_string(),
                p.meta_id.clone(),
                num(p.tau2_median),
                num(p.tau2_total_median),
                (p.tau2_median < p.tau2_total_median).to_string(),
            ]);
        }
    }
    csv_string(
        &["model", "meta_id", "tau2_low_risk", "tau2_total", "below_total"],
        rows,
    )
}

pub const PANEL_SIZE: f64 = 300.0;
pub const PANEL_MARGIN: f64 = 50.0;

/// Maps a value in `[0, max]` to a pixel offset in `[0, PANEL_SIZE]`.
fn scale(v: f64, max: f64) -> f64 {
    v / max * PANEL_SIZE
}

/// One square panel per fit: low-risk heterogeneity (y) against total
/// heterogeneity (x) on a shared linear scale, with the line y = x.
pub fn figure1_svg(panels: &[(&str, &Figure1Data)]) -> String {
    let width = PANEL_MARGIN + panels.len().max(1) as f64 * (PANEL_SIZE + PANEL_MARGIN);
    let height = PANEL_SIZE + 2.0 * PANEL_MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    for (k, (model, data)) in panels.iter().enumerate() {
        let x0 = PANEL_MARGIN + k as f64 * (PANEL_SIZE + PANEL_MARGIN);
        let y0 = PANEL_MARGIN + PANEL_SIZE;
        let max = data
            .points
            .iter()
            .flat_map(|p| [p.tau2_median, p.tau2_total_median])
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        let max = if max > 0.0 { max * 1.05 } else { 1.0 };
        let _ = writeln!(s, r#"<g class="panel" data-model="{model}" data-max="{max}">"#);
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{}" width="{PANEL_SIZE}" height="{PANEL_SIZE}" fill="none" stroke="black"/>"#,
            y0 - PANEL_SIZE
        );
        let _ = writeln!(
            s,
            r#"<line class="diagonal" x1="{x0}" y1="{y0}" x2="{}" y2="{}" stroke="black"/>"#,
            x0 + PANEL_SIZE,
            y0 - PANEL_SIZE
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{model} ({} of {} below)</text>"#,
            x0 + PANEL_SIZE / 2.0,
            PANEL_MARGIN - 10.0,
            data.n_below_total,
            data.points.len()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">total heterogeneity (0 to {max:.3})</text>"#,
            x0 + PANEL_SIZE / 2.0,
            y0 + 30.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">low-risk heterogeneity</text>"#,
            x0 - 12.0,
            y0 - PANEL_SIZE / 2.0,
            x0 - 12.0,
            y0 - PANEL_SIZE / 2.0
        );
        for p in &data.points {
            if !(p.tau2_median.is_finite() && p.tau2_total_median.is_finite()) {
                continue;
            }
            let cx = x0 + scale(p.tau2_total_median, max);
            let cy = y0 - scale(p.tau2_median, max);
            let _ = writeln!(
                s,
                r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="3" fill="none" stroke="steelblue" data-meta="{}"/>"#,
                p.meta_id
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
