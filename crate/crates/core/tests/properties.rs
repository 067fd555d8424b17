mod common;

use proptest::prelude::*;
use robhet::dataset::{describe, filter_eligible, parse_trials, write_trials, OutcomeType, RobJudgment, TrialRecord};
use robhet::decompose::{
    proportion_explained, total_variance_bivariable, total_variance_general, total_variance_univariable, CellWeights,
    DecompositionInput,
};
use robhet::mcmc::gelman_rubin;
use robhet::model::{cell_mean, cell_variance, log_likelihood_trial, BiasCell, Characteristic, ModelSpec};
use robhet::simulate::{generate_dataset, mc_variance_oracle, CountDistribution, SimShape, SimTruth};
use robhet::stats::quantile;

fn judgment() -> impl Strategy<Value = RobJudgment> {
    prop_oneof![
        Just(RobJudgment::Low),
        Just(RobJudgment::High),
        Just(RobJudgment::Unclear)
    ]
}

fn trial_strategy() -> impl Strategy<Value = TrialRecord> {
    (
        0usize..4,
        1u64..200,
        1u64..200,
        0.0f64..=1.0,
        0.0f64..=1.0,
        judgment(),
        judgment(),
        judgment(),
    )
        .prop_map(|(m, nt, nc, ft, fc, sg, ac, bl)| TrialRecord {
            meta_id: format!("m{m}"),
            trial_id: String::new(),
            events_treat: (ft * nt as f64) as u64,
            n_treat: nt,
            events_ctrl: (fc * nc as f64) as u64,
            n_ctrl: nc,
            rob_sg: sg,
            rob_ac: ac,
            rob_bl: bl,
            outcome: OutcomeType::ALL[m % 3],
        })
}

fn dataset_strategy() -> impl Strategy<Value = robhet::dataset::Dataset> {
    prop::collection::vec(trial_strategy(), 0..40).prop_map(|mut trials| {
        for (i, t) in trials.iter_mut().enumerate() {
            t.trial_id = format!("t{i}");
        }
        robhet::dataset::Dataset::from_trials(trials).unwrap()
    })
}

fn char_set() -> impl Strategy<Value = Vec<Characteristic>> {
    prop::sample::subsequence(Characteristic::ALL.to_vec(), 1..=3)
}

fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
    (char_set(), any::<bool>()).prop_map(|(c, i)| ModelSpec::new(c, i).unwrap())
}

fn input_strategy(spec: &ModelSpec) -> impl Strategy<Value = DecompositionInput> {
    let k = spec.k();
    let n = spec.n_terms();
    (
        0.001f64..0.3,
        prop::collection::vec(0.25f64..4.0, n),
        prop::collection::vec(-1.0f64..1.0, n),
        -2.0f64..2.0,
        prop::collection::vec(0.0f64..=1.0, k),
    )
        .prop_map(|(tau2, lambdas, biases, d, pis)| DecompositionInput {
            tau2,
            lambdas,
            biases,
            d,
            weights: CellWeights::Marginal(pis),
        })
}

fn spec_and_input() -> impl Strategy<Value = (ModelSpec, DecompositionInput)> {
    spec_strategy().prop_flat_map(|s| {
        let i = input_strategy(&s);
        (Just(s), i)
    })
}

proptest! {
    #[test]
    fn cell_counts_sum_to_trials(ds in dataset_strategy()) {
        let d = describe(&ds);
        prop_assert_eq!(d.cell_counts.iter().sum::<usize>(), ds.n_trials());
    }

    #[test]
    fn eligibility_filter_is_idempotent(ds in dataset_strategy(), chars in char_set()) {
        let (once, _) = filter_eligible(&ds, &chars);
        let (twice, excluded) = filter_eligible(&once, &chars);
        prop_assert_eq!(once, twice);
        prop_assert!(excluded.is_empty());
    }

    #[test]
    fn serialize_then_parse_is_identity(ds in dataset_strategy()) {
        let text = write_trials(&ds).unwrap();
        prop_assert_eq!(parse_trials(&text).unwrap(), ds);
    }

    #[test]
    fn all_low_cell_variance_is_tau2(spec in spec_strategy(), tau2 in 1e-6f64..10.0, l in 0.1f64..10.0) {
        let lambdas = vec![l; spec.n_terms()];
        prop_assert_eq!(cell_variance(tau2, &lambdas, BiasCell::all_low(spec.k()), &spec).unwrap(), tau2);
    }

    #[test]
    fn main_effects_add_without_interactions(
        chars in char_set(), d in -2.0f64..2.0, b in prop::collection::vec(-1.0f64..1.0, 3), mask in 0u8..8,
    ) {
        let spec = ModelSpec::new(chars, false).unwrap();
        let k = spec.k();
        let cell = BiasCell::from_mask(mask & ((1 << k) - 1), k);
        let biases = &b[..k];
        let flagged: f64 = (0..k).filter(|&j| cell.is_flagged(j)).map(|j| biases[j]).sum();
        let diff = cell_mean(d, biases, cell, &spec).unwrap() - cell_mean(d, biases, BiasCell::all_low(k), &spec).unwrap();
        prop_assert!((diff - flagged).abs() < 1e-12);
    }

    #[test]
    fn likelihood_is_additive_over_trials(
        a in trial_strategy(), b in trial_strategy(), mu in -3.0f64..3.0, theta in -2.0f64..2.0,
    ) {
        // two trials equal one trial with pooled counts up to the binomial coefficients
        let kernel = |t: &TrialRecord| {
            log_likelihood_trial(t, mu, theta)
                - statrs::function::factorial::ln_binomial(t.n_treat, t.events_treat)
                - statrs::function::factorial::ln_binomial(t.n_ctrl, t.events_ctrl)
        };
        let mut pooled = a.clone();
        pooled.events_treat += b.events_treat;
        pooled.n_treat += b.n_treat;
        pooled.events_ctrl += b.events_ctrl;
        pooled.n_ctrl += b.n_ctrl;
        prop_assert!((kernel(&a) + kernel(&b) - kernel(&pooled)).abs() < 1e-8);
    }

    #[test]
    fn total_variance_bounds_and_translation((spec, input) in spec_and_input(), shift in -7.0f64..7.0) {
        let total = total_variance_general(&input, &spec).unwrap();
        let cells = robhet::decompose::cell_moments(&input, &spec).unwrap();
        let within: f64 = cells.iter().map(|(w, _, v)| w * v).sum();
        prop_assert!(total >= within - 1e-12);
        let moved = DecompositionInput { d: input.d + shift, ..input.clone() };
        let t2 = total_variance_general(&moved, &spec).unwrap();
        prop_assert!((total - t2).abs() < 1e-10 * total.max(1.0));
    }

    #[test]
    fn single_cell_weight_gives_cell_variance(spec in spec_strategy(), tau2 in 0.001f64..0.3, seed_mask in 0u8..8) {
        let k = spec.k();
        let target = seed_mask & ((1 << k) - 1);
        let lambdas: Vec<f64> = (0..spec.n_terms()).map(|t| 0.5 + 0.4 * t as f64).collect();
        let biases: Vec<f64> = (0..spec.n_terms()).map(|t| 0.3 - 0.2 * t as f64).collect();
        let mut w = vec![0.0; 1 << k];
        w[target as usize] = 1.0;
        let input = DecompositionInput { tau2, lambdas: lambdas.clone(), biases, d: 0.4, weights: CellWeights::Joint(w) };
        let want = cell_variance(tau2, &lambdas, BiasCell::from_mask(target, k), &spec).unwrap();
        let got = total_variance_general(&input, &spec).unwrap();
        prop_assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn closed_forms_agree(
        tau2 in 0.001f64..0.3, l in prop::collection::vec(0.25f64..4.0, 3), b in prop::collection::vec(-1.0f64..1.0, 3),
        d in -3.0f64..3.0, p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0,
    ) {
        let a = ModelSpec::preset("A1").unwrap();
        let uni = DecompositionInput { tau2, lambdas: vec![l[0]], biases: vec![b[0]], d, weights: CellWeights::Marginal(vec![p1]) };
        let g = total_variance_general(&uni, &a).unwrap();
        prop_assert!((g - total_variance_univariable(tau2, l[0], b[0], p1).unwrap()).abs() < 1e-10);

        let bspec = ModelSpec::preset("B1").unwrap();
        let bi = DecompositionInput { tau2, lambdas: l.clone(), biases: b.clone(), d, weights: CellWeights::Marginal(vec![p1, p2]) };
        let g = total_variance_general(&bi, &bspec).unwrap();
        let c = total_variance_bivariable(tau2, [l[0], l[1], l[2]], [b[0], b[1], b[2]], d, p1, p2).unwrap();
        prop_assert!((g - c).abs() < 1e-10);
    }

    #[test]
    fn proportion_is_clamped_and_monotone(tau2 in 1e-6f64..1.0, a in 1e-6f64..2.0, b in 1e-6f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let p_lo = proportion_explained(tau2, lo).unwrap();
        let p_hi = proportion_explained(tau2, hi).unwrap();
        prop_assert!((0.0..=1.0).contains(&p_lo) && (0.0..=1.0).contains(&p_hi));
        prop_assert!(p_lo <= p_hi);
    }

    #[test]
    fn gelman_rubin_is_at_least_one(a in prop::collection::vec(-5.0f64..5.0, 2..50), shift in -3.0f64..3.0) {
        let b: Vec<f64> = a.iter().rev().map(|x| x * 0.5 + shift).collect();
        let r = gelman_rubin(&[&a, &b]).unwrap();
        prop_assert!(r >= 1.0);
        prop_assert_eq!(r, gelman_rubin(&[&b, &a]).unwrap());
    }

    #[test]
    fn quantiles_are_ordered(xs in prop::collection::vec(-100.0f64..100.0, 1..60), p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(quantile(&xs, lo) <= quantile(&xs, hi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulated_datasets_are_eligible_and_round_trip(
        spec in spec_strategy(), seed in any::<u64>(), p in prop::collection::vec(0.2f64..0.8, 3), rho in 0.0f64..=1.0,
    ) {
        let truth = SimTruth::uniform(&spec, 1.5, -0.1, 0.1);
        let shape = SimShape {
            n_metas: 5,
            trials_per_meta: CountDistribution::new(6, 8, 12),
            prob_high_or_unclear: [p[0], p[1], p[2]],
            flag_correlation: rho,
            ..SimShape::default()
        };
        let (ds, _) = generate_dataset(&truth, &shape, &spec, seed).unwrap();
        prop_assert!(filter_eligible(&ds, &spec.characteristics).1.is_empty());
        prop_assert_eq!(parse_trials(&write_trials(&ds).unwrap()).unwrap(), ds);
    }
}

proptest! {
    // fixed seed: a statistical check should not vary between runs
    #![proptest_config(ProptestConfig {
        cases: 25,
        rng_seed: proptest::test_runner::RngSeed::Fixed(20),
        ..ProptestConfig::default()
    })]

    #[test]
    fn oracle_agrees_with_general_form((spec, input) in spec_and_input(), seed in any::<u64>()) {
        let exact = total_variance_general(&input, &spec).unwrap();
        let (v, se) = mc_variance_oracle(&input, &spec, 200_000, seed).unwrap();
        prop_assert!((v - exact).abs() < 4.0 * se, "{} vs {} (se {})", v, exact, se);
    }
}
