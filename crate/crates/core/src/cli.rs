//! Command-line interface: `fit`, `decompose`, `simulate`, `diagnose` and `report`.
//!
//! Exit status is 0 on success, 2 when a fit or diagnosis finds a monitored
//! parameter with R-hat above 1.05, and 1 on any error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use serde::Serialize;

use crate::dataset::{filter_eligible, parse_trials, write_trials, Dataset};
use crate::decompose::{figure1_data, per_meta_decomposition, DecompositionResult};
use crate::error::{Error, Result};
use crate::mcmc::{
    monitored_names, read_chain_csv, run_analysis, write_chain_csv, ChainSamples, McmcConfig, PosteriorSamples,
    RHAT_THRESHOLD,
};
use crate::model::{CellWeighting, ModelSpec};
use crate::report::{figure1_csv, figure1_svg, fit_summary, table3_csv, table4_csv, table_s1_csv, FitSummary};
use crate::simulate::{generate_dataset, CountDistribution, SimShape, SimTruth};

pub const DATA_FILE: &str = "data.csv";
pub const SPEC_FILE: &str = "spec.json";
pub const CONFIG_FILE: &str = "mcmc.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRUTH_FILE: &str = "truth.json";

pub fn chain_file(k: usize) -> String {
    format!("chain_{k}.csv")
}

#[derive(Debug, Parser)]
#[command(
    name = "robhet",
    version,
    about = "Bias-adjusted heterogeneity models for meta-epidemiological data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a trial CSV and write chains and a summary.
    Fit(FitArgs),
    /// Decompose heterogeneity for a completed fit.
    Decompose(DecomposeArgs),
    /// Generate a synthetic dataset with a truth sidecar.
    Simulate(SimulateArgs),
    /// Recompute convergence diagnostics from a fit's chain files.
    Diagnose(DiagnoseArgs),
    /// Write results tables and the heterogeneity figure for one or more fits.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Named model: A1, A2, A3, B1, B2, B3 or B4.
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,
    /// Model specification JSON file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelSpec> {
        match (&self.preset, &self.spec) {
            (Some(p), None) => ModelSpec::preset(p),
            (None, Some(path)) => ModelSpec::from_json(&read(path)?),
            (None, None) => Err(Error::InvalidSpec("one of --preset or --spec is required".into())),
            (Some(_), Some(_)) => Err(Error::InvalidSpec("--preset and --spec are exclusive".into())),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "ROBHET_OUT", default_value = "robhet-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Trial-level CSV.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Kept iterations per chain.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// 1,000 burn-in and 10,000 kept iterations unless overridden.
    #[arg(long)]
    pub fast: bool,
    /// Sample from the prior only.
    #[arg(long)]
    pub prior_only: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

impl FitArgs {
    pub fn mcmc_config(&self) -> McmcConfig {
        let base = if self.fast {
            McmcConfig::fast()
        } else {
            McmcConfig::default()
        };
        McmcConfig {
            n_iter: self.iters.unwrap_or(base.n_iter),
            n_burnin: self.burnin.unwrap_or(base.n_burnin),
            n_chains: self.chains.unwrap_or(base.n_chains),
            thin: self.thin.unwrap_or(base.thin),
            seed: self.seed,
            prior_only: self.prior_only,
            ..base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Weighting {
    Marginal,
    Joint,
}

impl From<Weighting> for CellWeighting {
    fn from(w: Weighting) -> Self {
        match w {
            Weighting::Marginal => CellWeighting::MarginalIndependent,
            Weighting::Joint => CellWeighting::EmpiricalJoint,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DecomposeArgs {
    /// Fit directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Cell weights; defaults to the fit's model specification.
    #[arg(long, value_enum)]
    pub weighting: Option<Weighting>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 50)]
    pub metas: usize,
    /// Trials per meta-analysis as min,median,max.
    #[arg(long, default_value = "5,10,75")]
    pub trials_per_meta: String,
    /// Participants per arm as min,median,max.
    #[arg(long, default_value = "4,60,2000")]
    pub arm_size: String,
    /// True heterogeneity ratio for every term.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// True mean bias for every term.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub b0: f64,
    /// True between-meta SD of bias for every term.
    #[arg(long, default_value_t = 0.1)]
    pub phi: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    /// Fit directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; defaults to the fit directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Fit directories; repeat for several models.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub weighting: Option<Weighting>,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Successful outcome of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    ConvergenceWarning,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::ConvergenceWarning => 2,
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(status) => ExitCode::from(status.exit_code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Decompose(a) => cmd_decompose(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn model_name(spec: &ModelSpec, dir: &Path) -> String {
    spec.preset_name()
        .filter(|_| spec.tau2_covariates == Default::default())
        .map(str::to_string)
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "model".into())
}

fn warn_convergence(flagged: &[String]) {
    eprintln!(
        "warning: R-hat above {RHAT_THRESHOLD} for {}; run longer chains before interpreting results",
        flagged.join(", ")
    );
}

pub fn cmd_fit(a: &FitArgs) -> Result<Status> {
    let spec = a.model.resolve()?;
    let ds = parse_trials(&read(&a.input)?)?;
    let (_, excluded) = filter_eligible(&ds, &spec.characteristics);
    if !excluded.is_empty() {
        let ids: Vec<&str> = excluded.iter().map(|e| e.meta_id.as_str()).collect();
        return Err(Error::Ineligible(format!(
            "every meta-analysis needs low and high/unclear trials for each characteristic; failing: {}",
            ids.join(", ")
        )));
    }
    let cfg = a.mcmc_config();
    cfg.validate()?;
    let samples = run_analysis(&spec, &ds, &cfg)?;

    let dir = &a.out.out;
    fs::create_dir_all(dir)?;
    for c in &samples.chains {
        write(dir, &chain_file(c.chain_index), &write_chain_csv(c, cfg.thin)?)?;
    }
    let summary = fit_summary(&model_name(&spec, dir), &spec, &ds, &samples)?;
    write(dir, SUMMARY_FILE, &summary.to_json()?)?;
    write(dir, SPEC_FILE, &(spec.to_json()? + "\n"))?;
    write(dir, CONFIG_FILE, &to_json(&cfg)?)?;
    write(dir, DATA_FILE, &write_trials(&ds)?)?;

    for (name, e) in &summary.lambda {
        println!("lambda[{name}] {}", e.interval);
    }
    println!(
        "DIC {:.1} (D_res {:.1}, p_D {:.1})",
        summary.dic.dic, summary.dic.d_res_bar, summary.dic.p_d
    );
    if samples.converged() {
        Ok(Status::Ok)
    } else {
        warn_convergence(&samples.flagged);
        Ok(Status::ConvergenceWarning)
    }
}

/// A completed fit read back from its directory.
#[derive(Debug, Clone)]
pub struct LoadedFit {
    pub dir: PathBuf,
    pub spec: ModelSpec,
    pub dataset: Dataset,
    pub config: McmcConfig,
    pub samples: PosteriorSamples,
    pub summary: FitSummary,
}

pub fn load_fit(dir: &Path) -> Result<LoadedFit> {
    let spec = ModelSpec::from_json(&read(&dir.join(SPEC_FILE))?)?;
    let dataset = parse_trials(&read(&dir.join(DATA_FILE))?)?;
    let config: McmcConfig = serde_json::from_str(&read(&dir.join(CONFIG_FILE))?)?;
    let summary = FitSummary::from_json(&read(&dir.join(SUMMARY_FILE))?)?;
    let mut chains = Vec::with_capacity(config.n_chains);
    for k in 0..config.n_chains {
        let t = read_chain_csv(&read(&dir.join(chain_file(k)))?)?;
        chains.push(ChainSamples {
            chain_index: k,
            seed: config.seed ^ k as u64,
            names: t.names,
            draws: t.draws,
            deviance: t.deviance,
            mean_fitted: Vec::new(),
            acceptance: IndexMap::new(),
            scales_after_burnin: Vec::new(),
            scales_final: Vec::new(),
        });
    }
    let samples = PosteriorSamples::from_chains(chains, monitored_names(&spec))?;
    Ok(LoadedFit {
        dir: dir.to_path_buf(),
        spec,
        dataset,
        config,
        samples,
        summary,
    })
}

fn decompose_fit(fit: &LoadedFit, weighting: Option<Weighting>) -> Result<DecompositionResult> {
    let mut spec = fit.spec.clone();
    if let Some(w) = weighting {
        spec.cell_weighting = w.into();
    }
    per_meta_decomposition(&fit.samples, &fit.dataset, &spec)
}

pub fn cmd_decompose(a: &DecomposeArgs) -> Result<Status> {
    let fit = load_fit(&a.input)?;
    let result = decompose_fit(&fit, a.weighting)?;
    let dir = &a.out.out;
    fs::create_dir_all(dir)?;
    write(dir, "decomposition.json", &to_json(&result)?)?;
    let s = result.summary;
    println!(
        "proportion explained: median {:.2}; 95% interval {:.2} to {:.2} across {} meta-analyses",
        s.median,
        s.lower95,
        s.upper95,
        result.metas.len()
    );
    Ok(Status::Ok)
}

fn parse_counts(text: &str, what: &str) -> Result<CountDistribution> {
    let parts: Vec<u64> = text
        .split(',')
        .map(|p| p.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Simulation(format!("{what} must be min,median,max, got '{text}'")))?;
    match parts.as_slice() {
        [a, b, c] => Ok(CountDistribution::new(*a, *b, *c)),
        _ => Err(Error::Simulation(format!(
            "{what} must be min,median,max, got '{text}'"
        ))),
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<Status> {
    let spec = a.model.resolve()?;
    let truth = SimTruth::uniform(&spec, a.lambda, a.b0, a.phi);
    let shape = SimShape {
        n_metas: a.metas,
        trials_per_meta: parse_counts(&a.trials_per_meta, "--trials-per-meta")?,
        n_per_arm: parse_counts(&a.arm_size, "--arm-size")?,
        ..SimShape::default()
    };
    let (ds, record) = generate_dataset(&truth, &shape, &spec, a.seed)?;
    let dir = &a.out.out;
    fs::create_dir_all(dir)?;
    write(dir, DATA_FILE, &write_trials(&ds)?)?;
    write(dir, TRUTH_FILE, &(record.to_json()? + "\n"))?;
    println!("{} meta-analyses, {} trials", ds.metas().len(), ds.n_trials());
    Ok(Status::Ok)
}

#[derive(Debug, Serialize)]
struct Diagnostics {
    n_chains: usize,
    n_draws_per_chain: usize,
    threshold: f64,
    converged: bool,
    flagged: Vec<String>,
    r_hat: IndexMap<String, Option<f64>>,
    mc_error: IndexMap<String, Option<f64>>,
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> Result<Status> {
    let fit = load_fit(&a.input)?;
    let s = &fit.samples;
    let pick = |f: fn(&crate::mcmc::PosteriorSummary) -> Option<f64>| {
        s.summaries
            .iter()
            .map(|(n, v)| (n.clone(), f(v).filter(|x| x.is_finite())))
            .collect::<IndexMap<_, _>>()
    };
    let diag = Diagnostics {
        n_chains: s.chains.len(),
        n_draws_per_chain: s.chains.first().map_or(0, ChainSamples::len),
        threshold: RHAT_THRESHOLD,
        converged: s.converged(),
        flagged: s.flagged.clone(),
        r_hat: pick(|v| v.r_hat),
        mc_error: pick(|v| v.mc_error),
    };
    let dir = a.out.clone().unwrap_or_else(|| a.input.clone());
    fs::create_dir_all(&dir)?;
    write(&dir, "diagnostics.json", &to_json(&diag)?)?;
    for name in &s.monitored {
        let r = s.summary(name).and_then(|v| v.r_hat);
        println!("{name} r_hat {}", r.map_or("NA".into(), |r| format!("{r:.4}")));
    }
    if s.converged() {
        Ok(Status::Ok)
    } else {
        warn_convergence(&s.flagged);
        Ok(Status::ConvergenceWarning)
    }
}

pub fn cmd_report(a: &ReportArgs) -> Result<Status> {
    let fits = a.input.iter().map(|d| load_fit(d)).collect::<Result<Vec<_>>>()?;
    let decomps = fits
        .iter()
        .map(|f| decompose_fit(f, a.weighting))
        .collect::<Result<Vec<_>>>()?;
    let dir = &a.out.out;
    fs::create_dir_all(dir)?;

    let summaries: Vec<&FitSummary> = fits.iter().map(|f| &f.summary).collect();
    write(dir, "table3.csv", &table3_csv(&summaries)?)?;

    let mut spec_rows = Vec::new();
    for (f, d) in fits.iter().zip(&decomps) {
        let mut spec = f.spec.clone();
        spec.cell_weighting = d.weighting;
        spec_rows.push((f.summary.model.as_str(), spec, d));
    }
    let t4: Vec<_> = spec_rows.iter().map(|(m, s, d)| (*m, s, *d)).collect();
    write(dir, "table4.csv", &table4_csv(&t4)?)?;

    let figs: Vec<_> = decomps.iter().map(figure1_data).collect();
    let panels: Vec<_> = fits
        .iter()
        .zip(&figs)
        .map(|(f, d)| (f.summary.model.as_str(), d))
        .collect();
    write(dir, "figure1.csv", &figure1_csv(&panels)?)?;
    write(dir, "figure1.svg", &figure1_svg(&panels))?;

    let s1 = dir.join("tableS1.csv");
    if fits.len() > 1 {
        let rows: Vec<_> = fits
            .iter()
            .map(|f| (f.summary.model.as_str(), &f.spec, &f.summary.dic))
            .collect();
        write(dir, "tableS1.csv", &table_s1_csv(&rows)?)?;
    } else if s1.exists() {
        fs::remove_file(s1)?;
    }
    println!("wrote report for {} fit(s) to {}", fits.len(), dir.display());
    Ok(Status::Ok)
}
