#![allow(dead_code)]

use robhet::dataset::{Dataset, OutcomeType, RobJudgment, TrialRecord};
use robhet::mcmc::{monitored_names, param_names, ChainSamples, PosteriorSamples};
use robhet::model::ModelSpec;
use robhet::simulate::{generate_dataset, CountDistribution, SimShape, SimTruth};

pub fn trial(meta: &str, id: &str, counts: [u64; 4], flags: [bool; 3], outcome: OutcomeType) -> TrialRecord {
    let j = |f: bool| if f { RobJudgment::High } else { RobJudgment::Low };
    TrialRecord {
        meta_id: meta.into(),
        trial_id: id.into(),
        events_treat: counts[0],
        n_treat: counts[1],
        events_ctrl: counts[2],
        n_ctrl: counts[3],
        rob_sg: j(flags[0]),
        rob_ac: j(flags[1]),
        rob_bl: j(flags[2]),
        outcome,
    }
}

/// Two meta-analyses of four trials, every characteristic mixed in each.
pub fn toy_dataset() -> Dataset {
    let o = OutcomeType::Mortality;
    let s = OutcomeType::Subjective;
    Dataset::from_trials(vec![
        trial("m1", "t1", [10, 100, 15, 100], [false, false, false], o),
        trial("m1", "t2", [8, 60, 12, 60], [true, false, true], o),
        trial("m1", "t3", [20, 150, 30, 150], [false, true, false], o),
        trial("m1", "t4", [5, 40, 9, 41], [true, true, true], o),
        trial("m2", "t1", [30, 200, 28, 200], [true, false, false], s),
        trial("m2", "t2", [12, 80, 20, 80], [false, true, true], s),
        trial("m2", "t3", [0, 25, 3, 25], [false, false, false], s),
        trial("m2", "t4", [40, 300, 55, 310], [true, true, true], s),
    ])
    .unwrap()
}

/// The shape used by the recovery checks: about 12 trials per meta.
pub fn recovery_shape(n_metas: usize) -> SimShape {
    SimShape {
        n_metas,
        trials_per_meta: CountDistribution::new(8, 12, 16),
        ..SimShape::default()
    }
}

pub fn simulated(spec: &ModelSpec, lambda: f64, b0: f64, phi: f64, n_metas: usize, seed: u64) -> Dataset {
    let truth = SimTruth::uniform(spec, lambda, b0, phi);
    generate_dataset(&truth, &recovery_shape(n_metas), spec, seed)
        .unwrap()
        .0
}

/// A posterior built by hand: `value(name, chain, draw)` fills every column.
pub fn hand_posterior(
    spec: &ModelSpec,
    ds: &Dataset,
    n_chains: usize,
    n_draws: usize,
    value: impl Fn(&str, usize, usize) -> f64,
) -> PosteriorSamples {
    let names = param_names(spec, ds);
    let chains = (0..n_chains)
        .map(|c| ChainSamples {
            chain_index: c,
            seed: c as u64,
            draws: names
                .iter()
                .map(|n| (0..n_draws).map(|i| value(n, c, i)).collect())
                .collect(),
            names: names.clone(),
            deviance: vec![0.0; n_draws],
            mean_fitted: Vec::new(),
            acceptance: Default::default(),
            scales_after_burnin: Vec::new(),
            scales_final: Vec::new(),
        })
        .collect();
    PosteriorSamples::from_chains(chains, monitored_names(spec)).unwrap()
}
