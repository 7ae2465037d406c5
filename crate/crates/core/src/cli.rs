//! Command-line front end: `simulate`, `weight` and `estimate`.
//!
//! Every flag may also be given in a `--config` file holding one
//! `key = value` per line, where the key is the long flag name without the
//! dashes and `#` starts a comment. Flags on the command line take
//! precedence. Boolean flags accept `true` or `false` in config files.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
//! error. Numbers printed to the terminal carry 6 significant digits; CSV
//! outputs keep full precision.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use crate::data::{
    load_mediation_csv, load_panel_csv, MediationDataset, MediationSchema, PanelDataset,
    PanelSchema, VariableKind,
};
use crate::ebal::{solve_entropy_balance, EntropyOptions, WeightSolution};
use crate::error::{Error, Result};
use crate::formula::{parse_contrast, parse_formula};
use crate::glm::Family;
use crate::ipw::{
    censor_weights, ipw_mediation, ipw_panel, true_weights, DensityAccessor, IpwSpec,
    MediationWeight, WeightVector,
};
use crate::msm::{cde, effect_summary, fit_msm, ColumnSource, MsmFit};
use crate::rbw::{
    build_mediation_constraints, build_residual_constraints, refit_diagnostics,
    ConfounderModelSpec, HFunctionSpec, MediationSpec,
};
use crate::simulate::{
    run_monte_carlo_with, write_estimates_csv, write_summary_csv, Estimator, MonteCarloOptions,
    SimulationConfig,
};

const EXIT_RUNTIME: i32 = 1;
const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rbw", version, about = "Residual balancing weights for marginal structural models")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo comparison of weighting estimators on the simulated panel.
    Simulate(SimulateArgs),
    /// Construct weights for a panel or mediation dataset.
    Weight(WeightArgs),
    /// Fit a weighted marginal structural model.
    Estimate(EstimateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Key-value config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Units per sample.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Number of periods.
    #[arg(long, default_value_t = 3)]
    t: usize,
    /// Confounding strength.
    #[arg(long, default_value_t = 0.8, value_parser = positive_f64)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = KindArg::Binary)]
    treatment: KindArg,
    /// Analysts see the nonlinearly transformed confounders.
    #[arg(long)]
    misspecified: bool,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comma-separated subset of rbw, ipw_glm, ipw_glm_censored, ipw_truth.
    #[arg(long, value_delimiter = ',', value_parser = parse_estimator)]
    estimators: Vec<Estimator>,
    /// g-computation units for the continuous-treatment truth.
    #[arg(long, default_value_t = 1_000_000)]
    truth_sims: usize,
    /// Censoring percentiles for ipw_glm_censored.
    #[arg(long, default_value = "1,99", value_parser = parse_pair)]
    censor: (f64, f64),
    /// Worker threads; defaults to the available cores.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    /// Output directory for estimates.csv and summary.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    data: PathBuf,
    /// Key-value file mapping column roles.
    #[arg(long)]
    schema: PathBuf,
    /// One row per unit with treatment, mediator and outcome.
    #[arg(long)]
    mediation: bool,
    /// Pre-treatment confounders for mediation data, comma separated.
    #[arg(long, value_delimiter = ',')]
    pre: Option<Vec<String>>,
    /// Post-treatment confounders for mediation data, comma separated.
    #[arg(long, value_delimiter = ',')]
    post: Option<Vec<String>>,
    /// Recode a panel treatment as the indicator `D > cutoff`.
    #[arg(long)]
    dichotomize: Option<f64>,
}

#[derive(Debug, Args)]
struct WeightArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, value_enum)]
    method: Method,
    /// Regressors of the rbw confounder models.
    #[arg(long, value_enum, default_value_t = ModelSpec::LagOne)]
    spec: ModelSpec,
    /// Family of every rbw confounder model; `auto` picks by level of measurement.
    #[arg(long, default_value = "auto")]
    confounder_family: String,
    /// Balance treatments up to this many periods ahead; default is the full horizon.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Use unstabilized inverse probability weights.
    #[arg(long)]
    unstabilized: bool,
    /// Condition ipw numerators on baseline covariates.
    #[arg(long)]
    baseline_conditioning: bool,
    #[arg(long, default_value = "1,99", value_parser = parse_pair)]
    censor: (f64, f64),
    /// Column holding the true treatment density (ipw-truth).
    #[arg(long)]
    truth_density: Option<String>,
    /// Column holding the stabilizing numerator density (ipw-truth).
    #[arg(long)]
    truth_numerator: Option<String>,
    /// Mediation ipw variant.
    #[arg(long, value_enum, default_value_t = MediationVariant::Star)]
    mediation_weight: MediationVariant,
    /// Weights CSV with columns id, weight.
    #[arg(long)]
    out: PathBuf,
    /// Diagnostics CSV; defaults to the weights path with a `.diagnostics.csv` suffix.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    input: DataArgs,
    /// Weights CSV with unit id in the first column and weight in the second.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    formula: String,
    /// Mediator values at which to report the controlled direct effect.
    #[arg(long, value_delimiter = ',')]
    cde_at: Vec<f64>,
    /// Linear combination of coefficients, e.g. `10*b1+10*b2` (b0 is the intercept).
    #[arg(long)]
    contrast: Vec<String>,
    /// Coefficient table CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Binary,
    Continuous,
}

impl From<KindArg> for VariableKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Binary => VariableKind::Binary,
            KindArg::Continuous => VariableKind::Continuous,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Rbw,
    Ipw,
    IpwCensored,
    IpwTruth,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelSpec {
    /// Previous-period confounders and treatment.
    LagOne,
    /// Previous-period treatment only.
    PriorTreatment,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MediationVariant {
    Star,
    Dagger,
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be > 0, got {s}"))
    }
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(a), Ok(b)) if 0.0 <= a && a < b && b <= 100.0 => Ok((a, b)),
            _ => Err(format!("expected LOWER,UPPER with 0 <= LOWER < UPPER <= 100, got `{s}`")),
        },
        _ => Err(format!("expected LOWER,UPPER, got `{s}`")),
    }
}

fn parse_estimator(s: &str) -> std::result::Result<Estimator, String> {
    Estimator::parse(s.trim()).map_err(|e| e.to_string())
}

/// Format with 6 significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let e = x.abs().log10().floor() as i32;
    if (-5..6).contains(&e) {
        format!("{:.*}", (5 - e).max(0) as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("line {}: expected `key = value`", i + 1))
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::InvalidArgument(format!("line {}: empty key", i + 1)));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text)
}

/// Locate `--config` among the subcommand arguments.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

enum Usage {
    Clap(clap::Error),
    Message(String),
}

/// Rewrite config entries as flags placed ahead of the user's flags.
fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, Usage> {
    if args.len() < 2 {
        return Ok(args);
    }
    let Some(path) = config_path(&args[2..]) else {
        return Ok(args);
    };
    let sub_name = args[1].to_string_lossy().to_string();
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&sub_name) else {
        return Ok(args);
    };
    let entries = read_key_values(&path).map_err(|e| Usage::Message(e.to_string()))?;
    let mut injected = Vec::new();
    for (key, value) in entries {
        let flag = key.replace('_', "-");
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(flag.as_str()) && flag != "config")
            .ok_or_else(|| {
                Usage::Message(format!("{}: unknown key `{key}`", path.display()))
            })?;
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{flag}")));
            injected.push(OsString::from(value));
        } else {
            match value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" => injected.push(OsString::from(format!("--{flag}"))),
                "false" | "no" | "0" => {}
                _ => {
                    return Err(Usage::Message(format!(
                        "{}: `{key}` expects true or false",
                        path.display()
                    )))
                }
            }
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(injected);
    out.extend(args[2..].iter().cloned());
    Ok(out)
}

/// Parse arguments, run the command and return the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let sub_name = args
        .get(1)
        .map(|a| a.to_string_lossy().to_string())
        .unwrap_or_default();
    let parsed = expand_config(args).and_then(|a| Cli::try_parse_from(a).map_err(Usage::Clap));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(Usage::Clap(e)) => {
            let _ = e.print();
            if !e.use_stderr() {
                return 0;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", usage_for(&sub_name));
            }
            return EXIT_USAGE;
        }
        Err(Usage::Message(m)) => {
            eprintln!("error: {m}");
            return EXIT_USAGE;
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, &mut out),
        Command::Weight(a) => cmd_weight(&a, &mut out),
        Command::Estimate(a) => cmd_estimate(&a, &mut out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn usage_for(sub: &str) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match cmd.find_subcommand_mut(sub) {
        Some(s) => s.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn console(e: io::Error) -> Error {
    Error::io("<stdout>", e)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let config = SimulationConfig {
        n: a.n,
        periods: a.t,
        alpha: a.alpha,
        treatment_kind: a.treatment.into(),
        misspecified: a.misspecified,
        seed: a.seed,
        ..SimulationConfig::default()
    };
    let estimators = if a.estimators.is_empty() {
        Estimator::ALL.to_vec()
    } else {
        a.estimators.clone()
    };
    let opts = MonteCarloOptions {
        truth_sims: a.truth_sims,
        censor: a.censor,
        ..MonteCarloOptions::default()
    };
    let threads = a
        .threads
        .map(|t| t as usize)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let report =
        pool.install(|| run_monte_carlo_with(&config, &estimators, a.reps as usize, &opts))?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let est_path = a.out.join("estimates.csv");
    let sum_path = a.out.join("summary.csv");
    let mut w = create(&est_path)?;
    write_estimates_csv(&report, &mut w)?;
    w.flush().map_err(|e| Error::io(&est_path, e))?;
    let mut w = create(&sum_path)?;
    write_summary_csv(&report, &mut w)?;
    w.flush().map_err(|e| Error::io(&sum_path, e))?;

    writeln!(
        out,
        "{} treatment, {} specification, alpha {}, n {}, reps {}, truth from {}",
        config.treatment_kind,
        if config.misspecified { "incorrect" } else { "correct" },
        sig6(config.alpha),
        config.n,
        report.reps,
        report.truth_source
    )
    .map_err(console)?;
    writeln!(
        out,
        "{:<18} {:<6} {:>12} {:>12} {:>12} {:>12} {:>6}",
        "estimator", "coef", "truth", "bias", "sd", "rmse", "fails"
    )
    .map_err(console)?;
    for s in &report.summaries {
        let k = report
            .coefficient_names
            .iter()
            .position(|c| c == &s.coefficient)
            .unwrap_or(0);
        writeln!(
            out,
            "{:<18} {:<6} {:>12} {:>12} {:>12} {:>12} {:>6}",
            s.estimator.name(),
            s.coefficient,
            sig6(report.truth[k]),
            sig6(s.bias),
            sig6(s.sd),
            sig6(s.rmse),
            report.failure_count(s.estimator)
        )
        .map_err(console)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// data loading shared by weight and estimate
// ---------------------------------------------------------------------------

enum Loaded {
    Panel(PanelDataset),
    Mediation(MediationDataset),
}

impl Loaded {
    fn source(&self) -> &dyn ColumnSource {
        match self {
            Loaded::Panel(d) => d,
            Loaded::Mediation(d) => d,
        }
    }

    fn unit_ids(&self) -> &[String] {
        match self {
            Loaded::Panel(d) => d.unit_ids(),
            Loaded::Mediation(d) => d.unit_ids(),
        }
    }
}

struct SchemaMap {
    path: PathBuf,
    entries: HashMap<String, String>,
}

impl SchemaMap {
    fn read(path: &Path, allowed: &[&str]) -> Result<Self> {
        let mut entries = HashMap::new();
        for (k, v) in read_key_values(path)? {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Schema(format!(
                    "{}: unknown key `{k}` (expected one of {})",
                    path.display(),
                    allowed.join(", ")
                )));
            }
            entries.insert(k, v);
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    fn required(&self, key: &str) -> Result<String> {
        self.entries
            .get(key)
            .filter(|v| !v.is_empty())
            .cloned()
            .ok_or_else(|| Error::Schema(format!("{}: missing `{key}`", self.path.display())))
    }

    fn optional(&self, key: &str) -> Option<String> {
        self.entries.get(key).filter(|v| !v.is_empty()).cloned()
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.optional(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }

    fn kind(&self, key: &str) -> Result<VariableKind> {
        VariableKind::parse(&self.required(key)?)
    }
}

const PANEL_KEYS: &[&str] = &[
    "id",
    "time",
    "treatment",
    "treatment_kind",
    "outcome",
    "confounders",
    "baseline",
    "weight",
    "auxiliary",
];

const MEDIATION_KEYS: &[&str] = &[
    "id",
    "treatment",
    "treatment_kind",
    "mediator",
    "mediator_kind",
    "outcome",
    "pre",
    "post",
    "weight",
];

/// Panel schema from a `key = value` file with keys id, time, treatment,
/// treatment_kind, outcome, confounders, baseline, weight and auxiliary.
pub fn panel_schema_file(path: &Path, extra_auxiliary: &[String]) -> Result<PanelSchema> {
    let s = SchemaMap::read(path, PANEL_KEYS)?;
    let mut auxiliary = s.list("auxiliary");
    for a in extra_auxiliary {
        if !auxiliary.contains(a) {
            auxiliary.push(a.clone());
        }
    }
    Ok(PanelSchema {
        id: s.required("id")?,
        time: s.required("time")?,
        treatment: s.required("treatment")?,
        treatment_kind: s.kind("treatment_kind")?,
        outcome: s.required("outcome")?,
        confounders: s.list("confounders"),
        baseline: s.list("baseline"),
        base_weight: s.optional("weight"),
        auxiliary,
    })
}

fn load(input: &DataArgs, extra_auxiliary: &[String]) -> Result<Loaded> {
    if input.mediation {
        let s = SchemaMap::read(&input.schema, MEDIATION_KEYS)?;
        let schema = MediationSchema {
            id: s.optional("id"),
            treatment: s.required("treatment")?,
            treatment_kind: s.kind("treatment_kind")?,
            mediator: s.required("mediator")?,
            mediator_kind: s.kind("mediator_kind")?,
            outcome: s.required("outcome")?,
            pre: input.pre.clone().unwrap_or_else(|| s.list("pre")),
            post: input.post.clone().unwrap_or_else(|| s.list("post")),
            base_weight: s.optional("weight"),
        };
        if input.dichotomize.is_some() {
            return Err(Error::InvalidArgument(
                "--dichotomize applies to panel data only".into(),
            ));
        }
        return Ok(Loaded::Mediation(load_mediation_csv(&input.data, &schema)?));
    }
    if input.pre.is_some() || input.post.is_some() {
        return Err(Error::InvalidArgument(
            "--pre and --post require --mediation".into(),
        ));
    }
    let schema = panel_schema_file(&input.schema, extra_auxiliary)?;
    let data = load_panel_csv(&input.data, &schema)?;
    Ok(Loaded::Panel(match input.dichotomize {
        Some(c) => data.dichotomize_treatment(c),
        None => data,
    }))
}

// ---------------------------------------------------------------------------
// weight
// ---------------------------------------------------------------------------

struct Diagnostics {
    rows: Vec<(String, String)>,
}

impl Diagnostics {
    fn new() -> Self {
        Self { rows: Vec::new() }
    }

    fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.rows.push((key.into(), value.to_string()));
    }

    fn summary(&mut self, w: &WeightVector, ids: &[String]) {
        let s = &w.summary;
        self.push("min", s.min);
        self.push("max", s.max);
        self.push("mean", s.mean);
        self.push("cv", s.cv);
        let mut order: Vec<usize> = (0..w.weights.len()).collect();
        order.sort_by(|&a, &b| w.weights[b].total_cmp(&w.weights[a]));
        for (rank, &i) in order.iter().take(5).enumerate() {
            self.push(format!("largest_{}:{}", rank + 1, ids[i]), w.weights[i]);
        }
        for (rank, &i) in order.iter().rev().take(5).enumerate() {
            self.push(format!("smallest_{}:{}", rank + 1, ids[i]), w.weights[i]);
        }
    }

    fn solution(&mut self, sol: &WeightSolution, labels: &[String]) {
        self.push("iterations", sol.iterations);
        self.push("converged", sol.converged);
        self.push("objective", sol.objective);
        self.push("max_violation", sol.max_constraint_violation);
        self.push("pass", sol.balance.pass);
        if let Some(k) = sol.balance.worst_column {
            self.push("worst_column", &labels[k]);
        }
        self.push("dropped_columns", sol.dropped.len());
        for (label, m) in labels.iter().zip(&sol.balance.column_means) {
            self.push(format!("balance:{label}"), m);
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["statistic", "value"])?;
        for (k, v) in &self.rows {
            w.write_record([k, v])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn entropy_options(a: &WeightArgs) -> EntropyOptions {
    EntropyOptions {
        tol: a.tol,
        max_iter: a.max_iter,
        ..EntropyOptions::default()
    }
}

fn diagnostics_path(a: &WeightArgs) -> PathBuf {
    a.diagnostics.clone().unwrap_or_else(|| {
        let stem = a
            .out
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "weights".into());
        a.out.with_file_name(format!("{stem}.diagnostics.csv"))
    })
}

fn cmd_weight(a: &WeightArgs, out: &mut dyn Write) -> Result<()> {
    let mut aux = Vec::new();
    if a.method == Method::IpwTruth {
        let Some(col) = &a.truth_density else {
            return Err(Error::InvalidArgument(
                "ipw-truth needs --truth-density".into(),
            ));
        };
        aux.push(col.clone());
        aux.extend(a.truth_numerator.clone());
    }
    let loaded = load(&a.input, &aux)?;
    let ids = loaded.unit_ids().to_vec();
    let mut diag = Diagnostics::new();

    let weights = match (&loaded, a.method) {
        (Loaded::Panel(d), Method::Rbw) => {
            let mut spec = match a.spec {
                ModelSpec::LagOne => ConfounderModelSpec::lag_one(d),
                ModelSpec::PriorTreatment => ConfounderModelSpec::prior_treatment_only(d),
            };
            if a.confounder_family != "auto" {
                spec = spec.with_family(Family::parse(&a.confounder_family)?);
            }
            let hspec = match a.horizon {
                Some(k) => HFunctionSpec::with_lead(d.periods(), k),
                None => HFunctionSpec::default(),
            };
            let (c, _) = build_residual_constraints(d, &spec, &hspec)?;
            if c.n_constraints() == 0 {
                return Err(Error::EmptyConstraints);
            }
            let sol = solve_entropy_balance(&c, d.base_weights(), &entropy_options(a))?;
            let labels: Vec<String> = c.labels().iter().map(ToString::to_string).collect();
            diag.push("method", "rbw");
            diag.push("constraints", labels.len());
            diag.solution(&sol, &labels);
            let refit = refit_diagnostics(d, &spec, &hspec, &sol.weights)?;
            diag.push(
                "max_future_coefficient",
                refit.iter().map(|r| r.max_future_coefficient).fold(0.0, f64::max),
            );
            let w = WeightVector::new(sol.weights, "rbw");
            diag.summary(&w, &ids);
            w
        }
        (Loaded::Mediation(d), Method::Rbw) => {
            let spec = MediationSpec::default();
            let (c, _) = build_mediation_constraints(d, &spec)?;
            let sol = solve_entropy_balance(&c, d.base_weights(), &entropy_options(a))?;
            let labels: Vec<String> = c.labels().iter().map(ToString::to_string).collect();
            diag.push("method", "rbw");
            diag.push("constraints", labels.len());
            diag.solution(&sol, &labels);
            let w = WeightVector::new(sol.weights, "rbw");
            diag.summary(&w, &ids);
            w
        }
        (Loaded::Panel(d), Method::Ipw | Method::IpwCensored) => {
            let spec = IpwSpec::lag_one(d, !a.unstabilized, a.baseline_conditioning);
            let w = ipw_panel(d, &spec)?;
            censor_if(a, w, &ids, &mut diag)?
        }
        (Loaded::Mediation(d), Method::Ipw | Method::IpwCensored) => {
            let variant = match a.mediation_weight {
                MediationVariant::Star => MediationWeight::SwStar,
                MediationVariant::Dagger => MediationWeight::SwDagger,
            };
            censor_if(a, ipw_mediation(d, variant)?, &ids, &mut diag)?
        }
        (Loaded::Panel(d), Method::IpwTruth) => {
            let den = d
                .auxiliary(a.truth_density.as_deref().unwrap_or_default())
                .expect("auxiliary column requested at load");
            let num = a
                .truth_numerator
                .as_deref()
                .map(|c| d.auxiliary(c).expect("auxiliary column requested at load"));
            let w = true_weights(
                d,
                den,
                !a.unstabilized,
                num.map(|m| m as &dyn DensityAccessor),
            )?;
            diag.push("method", "ipw-truth");
            diag.summary(&w, &ids);
            w
        }
        (Loaded::Mediation(_), Method::IpwTruth) => {
            return Err(Error::Unsupported(
                "ipw-truth is available for panel data only".into(),
            ))
        }
    };

    let mut w = csv::Writer::from_writer(create(&a.out)?);
    w.write_record(["id", "weight"])?;
    for (id, v) in ids.iter().zip(weights.weights.iter()) {
        w.write_record([id.as_str(), &v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    diag.write(&diagnostics_path(a))?;

    let s = &weights.summary;
    writeln!(
        out,
        "{} weights for {} units: min {} max {} mean {} cv {}",
        weights.method,
        ids.len(),
        sig6(s.min),
        sig6(s.max),
        sig6(s.mean),
        sig6(s.cv)
    )
    .map_err(console)?;
    Ok(())
}

fn censor_if(
    a: &WeightArgs,
    w: WeightVector,
    ids: &[String],
    diag: &mut Diagnostics,
) -> Result<WeightVector> {
    if a.method == Method::IpwCensored {
        let c = censor_weights(&w, a.censor.0, a.censor.1)?;
        diag.push("method", "ipw-censored");
        diag.push("censor_lower_percentile", a.censor.0);
        diag.push("censor_upper_percentile", a.censor.1);
        diag.summary(&c, ids);
        Ok(c)
    } else {
        diag.push("method", "ipw");
        diag.summary(&w, ids);
        Ok(w)
    }
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

/// Match a weights CSV (id, weight) to the dataset's unit order.
pub fn read_weights(path: &Path, unit_ids: &[String]) -> Result<DVector<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let index: HashMap<&str, usize> = unit_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut w = vec![f64::NAN; unit_ids.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("");
        let raw = rec.get(1).unwrap_or("");
        let value = raw.parse::<f64>().map_err(|_| Error::NonNumeric {
            column: "weight".into(),
            row: row + 1,
            value: raw.to_string(),
        })?;
        let &i = index.get(id).ok_or_else(|| Error::Join(id.to_string()))?;
        w[i] = value;
    }
    if let Some(i) = w.iter().position(|v| v.is_nan()) {
        return Err(Error::InvalidData(format!(
            "unit {} has no weight in {}",
            unit_ids[i],
            path.display()
        )));
    }
    Ok(DVector::from_vec(w))
}

fn cmd_estimate(a: &EstimateArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = load(&a.input, &[])?;
    let src = loaded.source();
    let formula = parse_formula(&a.formula, &src.catalog())?;
    let weights = read_weights(&a.weights, loaded.unit_ids())?;
    let fit = fit_msm(src, &formula, &weights)?;

    let mut rows: Vec<(String, f64, f64)> = fit
        .names
        .iter()
        .zip(fit.coefficients.iter())
        .zip(fit.standard_errors().iter())
        .map(|((n, b), s)| (n.clone(), *b, *s))
        .collect();
    if !a.cde_at.is_empty() {
        let (d, m) = cde_terms(&loaded, &fit)?;
        for &v in &a.cde_at {
            let e = cde(&fit, &d, &m, v)?;
            rows.push((format!("CDE({v})"), e.estimate, e.se));
        }
    }
    for c in &a.contrast {
        let coef = parse_contrast(c, fit.coefficients.len())?;
        let e = effect_summary(&fit, &coef)?;
        rows.push((c.clone(), e.estimate, e.se));
    }

    let mut w = csv::Writer::from_writer(create(&a.out)?);
    w.write_record(["term", "estimate", "se"])?;
    for (name, b, s) in &rows {
        w.write_record([name.as_str(), &b.to_string(), &s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;

    writeln!(out, "{}  (n = {})", fit.formula, fit.n).map_err(console)?;
    writeln!(out, "{:<24} {:>12} {:>12}", "term", "estimate", "se").map_err(console)?;
    for (name, b, s) in &rows {
        writeln!(out, "{:<24} {:>12} {:>12}", name, sig6(*b), sig6(*s)).map_err(console)?;
    }
    Ok(())
}

fn cde_terms(loaded: &Loaded, fit: &MsmFit) -> Result<(String, String)> {
    match loaded {
        Loaded::Mediation(d) => Ok((d.treatment_name().into(), d.mediator_name().into())),
        Loaded::Panel(_) => Err(Error::InvalidArgument(format!(
            "--cde-at needs --mediation data (formula `{}`)",
            fit.formula
        ))),
    }
}
