//! Trial-level meta-epidemiological data.
//!
//! Input is a comma-delimited table with the fixed header
//!
//! ```text
//! meta_id,trial_id,events_treat,n_treat,events_ctrl,n_ctrl,rob_sg,rob_ac,rob_bl,outcome
//! ```
//!
//! Judgment tokens are `low`, `high` or `unclear`; outcome tokens are
//! `mortality`, `objective` or `subjective`. Both are case-insensitive.
//! Events are coded so that the outcome is harmful.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Characteristic;
use crate::stats;

pub const HEADER: [&str; 10] = [
    "meta_id",
    "trial_id",
    "events_treat",
    "n_treat",
    "events_ctrl",
    "n_ctrl",
    "rob_sg",
    "rob_ac",
    "rob_bl",
    "outcome",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobJudgment {
    Low,
    High,
    Unclear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RiskClass {
    LowRisk,
    HighOrUnclear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeType {
    Mortality,
    ObjectiveOther,
    Subjective,
}

impl OutcomeType {
    pub const ALL: [OutcomeType; 3] = [
        OutcomeType::Mortality,
        OutcomeType::ObjectiveOther,
        OutcomeType::Subjective,
    ];

    pub fn token(self) -> &'static str {
        match self {
            OutcomeType::Mortality => "mortality",
            OutcomeType::ObjectiveOther => "objective",
            OutcomeType::Subjective => "subjective",
        }
    }
}

impl FromStr for OutcomeType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mortality" => Ok(OutcomeType::Mortality),
            "objective" => Ok(OutcomeType::ObjectiveOther),
            "subjective" => Ok(OutcomeType::Subjective),
            other => Err(format!("unknown outcome token `{other}`")),
        }
    }
}

impl fmt::Display for OutcomeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl RobJudgment {
    pub fn token(self) -> &'static str {
        match self {
            RobJudgment::Low => "low",
            RobJudgment::High => "high",
            RobJudgment::Unclear => "unclear",
        }
    }
}

impl FromStr for RobJudgment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(RobJudgment::Low),
            "high" => Ok(RobJudgment::High),
            "unclear" => Ok(RobJudgment::Unclear),
            other => Err(format!("unknown risk-of-bias token `{other}`")),
        }
    }
}

/// High and unclear judgments are pooled against low.
pub fn dichotomize_judgment(j: RobJudgment) -> RiskClass {
    match j {
        RobJudgment::Low => RiskClass::LowRisk,
        RobJudgment::High | RobJudgment::Unclear => RiskClass::HighOrUnclear,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub meta_id: String,
    pub trial_id: String,
    pub events_treat: u64,
    pub n_treat: u64,
    pub events_ctrl: u64,
    pub n_ctrl: u64,
    pub rob_sg: RobJudgment,
    pub rob_ac: RobJudgment,
    pub rob_bl: RobJudgment,
    pub outcome: OutcomeType,
}

impl TrialRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.meta_id.is_empty() || self.trial_id.is_empty() {
            return Err("empty identifier".into());
        }
        if self.n_treat == 0 || self.n_ctrl == 0 {
            return Err("arm size must be at least 1".into());
        }
        if self.events_treat > self.n_treat {
            return Err(format!(
                "events_treat = {} exceeds n_treat = {}",
                self.events_treat, self.n_treat
            ));
        }
        if self.events_ctrl > self.n_ctrl {
            return Err(format!(
                "events_ctrl = {} exceeds n_ctrl = {}",
                self.events_ctrl, self.n_ctrl
            ));
        }
        Ok(())
    }

    pub fn judgment(&self, c: Characteristic) -> RobJudgment {
        match c {
            Characteristic::SG => self.rob_sg,
            Characteristic::AC => self.rob_ac,
            Characteristic::BL => self.rob_bl,
        }
    }

    pub fn risk(&self, c: Characteristic) -> RiskClass {
        dichotomize_judgment(self.judgment(c))
    }

    pub fn is_high_or_unclear(&self, c: Characteristic) -> bool {
        self.risk(c) == RiskClass::HighOrUnclear
    }

    /// Bit `j` is set when the trial is at high or unclear risk for `chars[j]`.
    pub fn cell_mask(&self, chars: &[Characteristic]) -> u8 {
        chars
            .iter()
            .enumerate()
            .filter(|(_, &c)| self.is_high_or_unclear(c))
            .fold(0u8, |m, (j, _)| m | (1 << j))
    }

    pub fn participants(&self) -> u64 {
        self.n_treat + self.n_ctrl
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaAnalysis {
    meta_id: String,
    outcome: OutcomeType,
    trials: Vec<TrialRecord>,
}

impl MetaAnalysis {
    pub fn new(trials: Vec<TrialRecord>) -> Result<Self> {
        let first = trials
            .first()
            .ok_or_else(|| Error::InsufficientData("meta-analysis without trials".into()))?;
        let meta_id = first.meta_id.clone();
        let outcome = first.outcome;
        let mut seen = HashSet::new();
        for t in &trials {
            t.validate().map_err(Error::Domain)?;
            if t.meta_id != meta_id {
                return Err(Error::Domain(format!(
                    "trial `{}` belongs to `{}`, not `{meta_id}`",
                    t.trial_id, t.meta_id
                )));
            }
            if t.outcome != outcome {
                return Err(Error::Domain(format!("meta-analysis `{meta_id}` mixes outcome types")));
            }
            if !seen.insert(t.trial_id.as_str()) {
                return Err(Error::Domain(format!(
                    "duplicate trial `{}` in meta-analysis `{meta_id}`",
                    t.trial_id
                )));
            }
        }
        Ok(Self {
            meta_id,
            outcome,
            trials,
        })
    }

    pub fn meta_id(&self) -> &str {
        &self.meta_id
    }

    pub fn outcome(&self) -> OutcomeType {
        self.outcome
    }

    pub fn trials(&self) -> &[TrialRecord] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    metas: Vec<MetaAnalysis>,
}

impl Dataset {
    pub fn new(metas: Vec<MetaAnalysis>) -> Result<Self> {
        let mut ids = HashSet::new();
        for m in &metas {
            if !ids.insert(m.meta_id()) {
                return Err(Error::Domain(format!("duplicate meta-analysis `{}`", m.meta_id())));
            }
        }
        Ok(Self { metas })
    }

    /// Groups trials by `meta_id` in order of first appearance, keeping row
    /// order within each meta-analysis.
    pub fn from_trials(trials: Vec<TrialRecord>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<TrialRecord>> = HashMap::new();
        for t in trials {
            if !groups.contains_key(&t.meta_id) {
                order.push(t.meta_id.clone());
            }
            groups.entry(t.meta_id.clone()).or_default().push(t);
        }
        let metas = order
            .into_iter()
            .map(|id| MetaAnalysis::new(groups.remove(&id).unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(metas)
    }

    pub fn metas(&self) -> &[MetaAnalysis] {
        &self.metas
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn n_trials(&self) -> usize {
        self.metas.iter().map(MetaAnalysis::len).sum()
    }

    pub fn trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.metas.iter().flat_map(|m| m.trials.iter())
    }
}

fn parse_count(field: &str, name: &str, line: u64) -> Result<u64> {
    field.trim().parse::<u64>().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {name} `{field}` as a count"),
    })
}

/// Parses the delimited trial table. Errors carry the 1-based line number.
pub fn parse_trials(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();

    let header = match records.next() {
        Some(r) => r?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header row".into(),
            })
        }
    };
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", HEADER.join(",")),
        });
    }

    let mut trials = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut outcome_of: HashMap<String, OutcomeType> = HashMap::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        if rec.len() != HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", HEADER.len(), rec.len()),
            });
        }
        let perr = |message: String| Error::Parse { line, message };
        let judgment = |i: usize| rec[i].parse::<RobJudgment>().map_err(perr);
        let trial = TrialRecord {
            meta_id: rec[0].trim().to_string(),
            trial_id: rec[1].trim().to_string(),
            events_treat: parse_count(&rec[2], "events_treat", line)?,
            n_treat: parse_count(&rec[3], "n_treat", line)?,
            events_ctrl: parse_count(&rec[4], "events_ctrl", line)?,
            n_ctrl: parse_count(&rec[5], "n_ctrl", line)?,
            rob_sg: judgment(6)?,
            rob_ac: judgment(7)?,
            rob_bl: judgment(8)?,
            outcome: rec[9].parse::<OutcomeType>().map_err(perr)?,
        };
        trial.validate().map_err(perr)?;
        if !seen.insert((trial.meta_id.clone(), trial.trial_id.clone())) {
            return Err(perr(format!(
                "duplicate trial `{}` in meta-analysis `{}`",
                trial.trial_id, trial.meta_id
            )));
        }
        match outcome_of.get(&trial.meta_id) {
            Some(&o) if o != trial.outcome => {
                return Err(perr(format!(
                    "outcome `{}` conflicts with `{o}` for meta-analysis `{}`",
                    trial.outcome, trial.meta_id
                )))
            }
            _ => {
                outcome_of.insert(trial.meta_id.clone(), trial.outcome);
            }
        }
        trials.push(trial);
    }
    Dataset::from_trials(trials)
}

/// Writes a dataset in the input schema; `parse_trials` reads it back unchanged.
pub fn write_trials(ds: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for t in ds.trials() {
        w.write_record([
            t.meta_id.as_str(),
            t.trial_id.as_str(),
            &t.events_treat.to_string(),
            &t.n_treat.to_string(),
            &t.events_ctrl.to_string(),
            &t.n_ctrl.to_string(),
            t.rob_sg.token(),
            t.rob_ac.token(),
            t.rob_bl.token(),
            t.outcome.token(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Exclusion {
    pub meta_id: String,
    pub reason: String,
}

/// Keeps the meta-analyses with at least one low-risk and at least one
/// high/unclear-risk trial for every characteristic in `chars`.
pub fn filter_eligible(ds: &Dataset, chars: &[Characteristic]) -> (Dataset, Vec<Exclusion>) {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for meta in ds.metas() {
        let missing: Vec<String> = chars
            .iter()
            .filter_map(|&c| {
                let flagged = meta.trials().iter().filter(|t| t.is_high_or_unclear(c)).count();
                if flagged == 0 {
                    Some(format!("no high/unclear-risk trial for {c}"))
                } else if flagged == meta.len() {
                    Some(format!("no low-risk trial for {c}"))
                } else {
                    None
                }
            })
            .collect();
        if missing.is_empty() {
            kept.push(meta.clone());
        } else {
            excluded.push(Exclusion {
                meta_id: meta.meta_id().to_string(),
                reason: missing.join("; "),
            });
        }
    }
    (Dataset { metas: kept }, excluded)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct JudgmentCounts {
    pub high: usize,
    pub unclear: usize,
    pub low: usize,
}

impl JudgmentCounts {
    fn add(&mut self, j: RobJudgment) {
        match j {
            RobJudgment::High => self.high += 1,
            RobJudgment::Unclear => self.unclear += 1,
            RobJudgment::Low => self.low += 1,
        }
    }
}

/// Five-number spread with interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let s = stats::sorted(values);
        Some(Self {
            min: s[0],
            q1: stats::quantile_sorted(&s, 0.25),
            median: stats::quantile_sorted(&s, 0.5),
            q3: stats::quantile_sorted(&s, 0.75),
            max: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeBreakdown {
    pub outcome: OutcomeType,
    pub n_trials: usize,
    /// Indexed like [`Characteristic::ALL`].
    pub judgments: [JudgmentCounts; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescriptiveSummary {
    pub n_metas: usize,
    pub n_trials: usize,
    /// Trial counts per SG x AC x BL cell; bit 0 = SG, bit 1 = AC, bit 2 = BL
    /// set when high/unclear.
    pub cell_counts: [usize; 8],
    pub judgments: [JudgmentCounts; 3],
    pub by_outcome: Vec<OutcomeBreakdown>,
    pub trials_per_meta: Option<Spread>,
    pub participants_per_trial: Option<Spread>,
}

impl DescriptiveSummary {
    pub fn cell_label(mask: usize) -> String {
        Characteristic::ALL
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let level = if mask & (1 << j) != 0 { "high/unclear" } else { "low" };
                format!("{c}={level}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn describe(ds: &Dataset) -> DescriptiveSummary {
    let mut cell_counts = [0usize; 8];
    let mut judgments = [JudgmentCounts::default(); 3];
    let mut by_outcome: Vec<OutcomeBreakdown> = OutcomeType::ALL
        .iter()
        .map(|&outcome| OutcomeBreakdown {
            outcome,
            n_trials: 0,
            judgments: [JudgmentCounts::default(); 3],
        })
        .collect();

    for t in ds.trials() {
        cell_counts[t.cell_mask(&Characteristic::ALL) as usize] += 1;
        let slot = OutcomeType::ALL
            .iter()
            .position(|&o| o == t.outcome)
            .expect("outcome in ALL");
        by_outcome[slot].n_trials += 1;
        for (j, &c) in Characteristic::ALL.iter().enumerate() {
            judgments[j].add(t.judgment(c));
            by_outcome[slot].judgments[j].add(t.judgment(c));
        }
    }

    let per_meta: Vec<f64> = ds.metas().iter().map(|m| m.len() as f64).collect();
    let per_trial: Vec<f64> = ds.trials().map(|t| t.participants() as f64).collect();
    DescriptiveSummary {
        n_metas: ds.metas().len(),
        n_trials: ds.n_trials(),
        cell_counts,
        judgments,
        by_outcome,
        trials_per_meta: Spread::of(&per_meta),
        participants_per_trial: Spread::of(&per_trial),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProportionEstimate {
    /// Share of trials at high/unclear risk, one per characteristic.
    pub marginals: Vec<f64>,
    /// Empirical frequency of each of the `2^K` cells, indexed by flag mask.
    pub joint: Vec<f64>,
}

pub fn empirical_proportions(meta: &MetaAnalysis, chars: &[Characteristic]) -> ProportionEstimate {
    let n = meta.len() as f64;
    let mut joint = vec![0.0; 1 << chars.len()];
    let mut marginals = vec![0.0; chars.len()];
    for t in meta.trials() {
        let mask = t.cell_mask(chars);
        joint[mask as usize] += 1.0;
        for (j, m) in marginals.iter_mut().enumerate() {
            if mask & (1 << j) != 0 {
                *m += 1.0;
            }
        }
    }
    joint.iter_mut().for_each(|x| *x /= n);
    marginals.iter_mut().for_each(|x| *x /= n);
    ProportionEstimate { marginals, joint }
}
