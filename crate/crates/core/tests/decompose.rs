mod common;

use robhet::decompose::{figure1_data, per_meta_decomposition, total_variance_univariable};
use robhet::mcmc::{run_analysis, McmcConfig};
use robhet::model::{CellWeighting, ModelSpec};
use robhet::report::{figure1_svg, PANEL_MARGIN, PANEL_SIZE};

use common::{hand_posterior, simulated, toy_dataset};

#[test]
fn homogeneous_posterior_explains_nothing() {
    let ds = toy_dataset();
    let spec = ModelSpec::preset("B4").unwrap();
    let post = hand_posterior(&spec, &ds, 2, 50, |name, c, i| {
        if name.starts_with("lambda") {
            1.0
        } else if name.starts_with("tau2") {
            0.01 + 0.001 * (i + 7 * c) as f64
        } else if name.starts_with("b[") {
            0.0
        } else {
            0.3
        }
    });
    let res = per_meta_decomposition(&post, &ds, &spec).unwrap();
    for m in &res.metas {
        assert_eq!(m.proportion_explained, 0.0);
        assert_eq!(m.tau2_median, m.tau2_total_median);
    }
    assert_eq!(res.summary.median, 0.0);

    let fig = figure1_data(&res);
    assert_eq!(fig.n_below_total, 0);
    let svg = figure1_svg(&[("B4", &fig)]);
    let bottom = PANEL_MARGIN + PANEL_SIZE;
    let mut n = 0;
    for line in svg.lines().filter(|l| l.contains("<circle")) {
        let attr = |key: &str| -> f64 {
            let start = line.find(&format!(" {key}=\"")).unwrap() + key.len() + 3;
            line[start..].split('"').next().unwrap().parse().unwrap()
        };
        assert!(
            ((attr("cx") - PANEL_MARGIN) - (bottom - attr("cy"))).abs() < 1e-9,
            "{line}"
        );
        n += 1;
    }
    assert_eq!(n, 2);
}

#[test]
fn single_draw_matches_direct_formula() {
    // A1 uses SG; both toy metas have SG flagged in two of four trials
    let ds = toy_dataset();
    let spec = ModelSpec::preset("A1").unwrap();
    let post = hand_posterior(&spec, &ds, 1, 1, |name, _, _| match name {
        "lambda[SG]" => 2.0,
        "tau2[m1]" => 0.04,
        "tau2[m2]" => 0.1,
        "b[SG][m1]" => 0.2,
        "b[SG][m2]" => 0.0,
        _ => 0.5,
    });
    let res = per_meta_decomposition(&post, &ds, &spec).unwrap();
    let want1 = total_variance_univariable(0.04, 2.0, 0.2, 0.5).unwrap();
    let want2 = total_variance_univariable(0.1, 2.0, 0.0, 0.5).unwrap();
    assert!((want1 - 0.07).abs() < 1e-15 && (want2 - 0.15).abs() < 1e-15);

    let m = &res.metas;
    assert!((m[0].tau2_total_median - 0.07).abs() < 1e-12);
    assert!((m[1].tau2_total_median - 0.15).abs() < 1e-12);
    assert!((m[0].proportion_explained - 3.0 / 7.0).abs() < 1e-12);
    assert!((m[1].proportion_explained - 1.0 / 3.0).abs() < 1e-12);
    assert!((res.summary.median - (3.0 / 7.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);

    let fig = figure1_data(&res);
    let pairs: Vec<(f64, f64)> = fig
        .points
        .iter()
        .map(|p| (p.tau2_median, p.tau2_total_median))
        .collect();
    assert_eq!(pairs[0].0, 0.04);
    assert_eq!(pairs[1].0, 0.1);
    assert_eq!(fig.n_below_total, 2);

    // with one characteristic the joint and marginal weightings coincide
    let joint = ModelSpec {
        cell_weighting: CellWeighting::EmpiricalJoint,
        ..spec.clone()
    };
    let rj = per_meta_decomposition(&post, &ds, &joint).unwrap();
    for (a, b) in rj.metas.iter().zip(&res.metas) {
        assert!((a.tau2_total_median - b.tau2_total_median).abs() < 1e-12);
    }
}

#[test]
fn negative_ratio_is_clamped_per_draw() {
    // a bias-protective lambda makes the total smaller than tau2
    let ds = toy_dataset();
    let spec = ModelSpec::preset("A1").unwrap();
    let post = hand_posterior(&spec, &ds, 1, 3, |name, _, _| match name {
        n if n.starts_with("lambda") => 0.25,
        n if n.starts_with("tau2") => 0.05,
        n if n.starts_with("b[") => 0.0,
        _ => 0.0,
    });
    let res = per_meta_decomposition(&post, &ds, &spec).unwrap();
    for m in &res.metas {
        assert!(m.proportion_unclamped < 0.0);
        assert_eq!(m.proportion_explained, 0.0);
    }
}

#[test]
fn strong_bias_fit_explains_a_large_share() {
    let spec = ModelSpec::preset("A3").unwrap();
    let ds = simulated(&spec, 3.0, 0.5, 0.1, 40, 5);
    let cfg = McmcConfig {
        n_iter: 4000,
        n_burnin: 1000,
        ..McmcConfig::default()
    };
    let post = run_analysis(&spec, &ds, &cfg).unwrap();
    let res = per_meta_decomposition(&post, &ds, &spec).unwrap();
    assert!(res.summary.median > 0.2, "{:?}", res.summary);
    assert!(figure1_data(&res).n_below_total > 30);
}
