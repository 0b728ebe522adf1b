//! Command implementations behind the `blowfish-rtp` binary.
//!
//! Every command writes its artifacts plus a `manifest.json` into `--out`.
//! Exit codes: 0 success or pass, 1 configuration error, 2 runtime error or
//! failed check. Flags override values read from `--config`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use blowfish_rtp::adversary::{self, ObservedRate, DEFAULT_GRID_POINTS};
use blowfish_rtp::mechanism::{blowfish_lambda, PrivacyParams};
use blowfish_rtp::metrics::{
    audit_epsilon, default_clip, rate_sampler, AuditReport, AuditSpec, DEFAULT_AUDIT_DELTA, DEFAULT_MIN_BIN_COUNT,
};
use blowfish_rtp::model::{
    expand_factorized, Belief, BeliefKind, HouseholdSpec, ModelMode, StateVector, DEFAULT_JOINT_LIMIT,
};
use blowfish_rtp::oracle::{factorized_kappa, oracle_check, OracleReport};
use blowfish_rtp::rng::StreamRng;
use blowfish_rtp::schema::{HouseholdBounds, ModelDocument};
use blowfish_rtp::simulator::{self, MechanismMode, SimulationConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "blowfish-rtp", version, about = "Blowfish-private real-time electricity pricing")]
pub struct Cli {
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pricing simulation with both mechanisms.
    Simulate(SimulateArgs),
    /// Compare factorized and joint discriminating households on random models.
    OracleCheck(OracleArgs),
    /// Estimate the privacy loss between two neighboring occupancy states.
    Audit(AuditArgs),
    /// Replay published rates through the Bayesian observer.
    Track(TrackArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Blowfish,
    Naive,
    Both,
}

impl From<ModeArg> for MechanismMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Blowfish => MechanismMode::Blowfish,
            ModeArg::Naive => MechanismMode::Naive,
            ModeArg::Both => MechanismMode::Both,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config JSON; omitted fields take default values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 8)]
    pub households: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 96)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Audit config JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Allowed excess of the estimate over epsilon.
    #[arg(long, default_value_t = 0.1)]
    pub slack: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// CSV with a `t` column and either `r_published,lambda` or
    /// `r_blowfish,lambda_blowfish`.
    #[arg(long)]
    pub rates: PathBuf,
    /// Model JSON including household bounds.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 62.5)]
    pub beta: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Whether a completed command's check passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub version: String,
    pub config_hash: String,
}

/// SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(runtime_err)
}

fn write_manifest<C: Serialize>(
    out: &Path,
    command: &str,
    config: &C,
    seed: Option<u64>,
    artifacts: &[&str],
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command: command.to_owned(),
        config: serde_json::to_value(config).map_err(runtime_err)?,
        seed,
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        config_hash: config_hash(config),
    };
    write_json(&out.join(MANIFEST), &manifest)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

/// Parse-free entry point: run a command inside a pool of `cli.threads`
/// workers and map the result to an exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(Outcome::Pass) => EXIT_OK,
        Ok(Outcome::Fail) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<Outcome, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(runtime_err)?;
    pool.install(|| match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::OracleCheck(a) => oracle(a, factorized_kappa),
        Command::Audit(a) => audit(a),
        Command::Track(a) => track(a),
    })
}

// ---- simulate ----

pub fn resolve_simulation_config(args: &SimulateArgs) -> Result<SimulationConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => serde_json::from_str(&read_text(path)?).map_err(config_err)?,
        None => SimulationConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(mode) = args.mode {
        config.mode = mode.into();
    }
    if let Some(eps) = args.epsilon {
        config.epsilon = eps;
    }
    config.validate().map_err(config_err)?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationMeta {
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    pub naive_lambda: f64,
    pub rmsre_blowfish: Option<f64>,
    pub rmsre_naive: Option<f64>,
    /// Naive RMSRE over Blowfish RMSRE.
    pub rmsre_ratio: Option<f64>,
}

pub const SIMULATION_CSV: &str = "simulation.csv";
pub const SIMULATION_JSON: &str = "simulation.json";
pub const SIMULATION_META: &str = "simulation.meta.json";

pub fn simulate(args: &SimulateArgs) -> Result<Outcome, CliError> {
    let config = resolve_simulation_config(args)?;
    let result = simulator::run(&config).map_err(runtime_err)?;
    let summary = result.summary().map_err(runtime_err)?;
    prepare_out(&args.out)?;

    let data_name = match args.format {
        Format::Csv => {
            let mut buf = Vec::new();
            result.write_csv(&mut buf).map_err(runtime_err)?;
            write_atomic(&args.out.join(SIMULATION_CSV), &buf).map_err(runtime_err)?;
            SIMULATION_CSV
        }
        Format::Json => {
            write_json(&args.out.join(SIMULATION_JSON), &result)?;
            SIMULATION_JSON
        }
    };
    let meta = SimulationMeta {
        seed: result.seed,
        config_hash: result.config_hash.clone(),
        steps: result.records.len(),
        naive_lambda: result.naive_lambda,
        rmsre_blowfish: summary.blowfish,
        rmsre_naive: summary.naive,
        rmsre_ratio: summary.ratio,
    };
    write_json(&args.out.join(SIMULATION_META), &meta)?;
    write_manifest(&args.out, "simulate", &config, Some(config.seed), &[data_name, SIMULATION_META])?;

    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| x.to_string());
    println!("rmsre_blowfish {}", show(summary.blowfish));
    println!("rmsre_naive    {}", show(summary.naive));
    println!("ratio          {}", show(summary.ratio));
    Ok(Outcome::Pass)
}

// ---- oracle-check ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub households: usize,
    pub trials: usize,
    pub steps: usize,
    pub seed: u64,
    pub joint_limit: usize,
}

pub const ORACLE_REPORT: &str = "oracle_report.json";

/// Run the cross-check with an injectable fast path.
pub fn oracle<F>(args: &OracleArgs, fast_path: F) -> Result<Outcome, CliError>
where
    F: Fn(&Belief) -> blowfish_rtp::Result<BTreeSet<usize>> + Sync,
{
    let config = OracleConfig {
        households: args.households,
        trials: args.trials,
        steps: args.steps,
        seed: args.seed,
        joint_limit: DEFAULT_JOINT_LIMIT,
    };
    if config.households == 0 || config.households > config.joint_limit {
        return Err(CliError::Config(format!(
            "households must lie in 1..={}",
            config.joint_limit
        )));
    }
    if config.trials == 0 || config.steps == 0 {
        return Err(CliError::Config("need at least one trial and one step".into()));
    }
    let report: OracleReport = oracle_check(
        config.households,
        config.trials,
        config.steps,
        config.seed,
        config.joint_limit,
        fast_path,
    )
    .map_err(runtime_err)?;
    prepare_out(&args.out)?;
    write_json(&args.out.join(ORACLE_REPORT), &report)?;
    write_manifest(&args.out, "oracle-check", &config, Some(config.seed), &[ORACLE_REPORT])?;
    match &report.mismatch {
        None => {
            println!(
                "oracle-check N={} passed: {} comparisons",
                config.households, report.comparisons
            );
            Ok(Outcome::Pass)
        }
        Some(m) => {
            println!(
                "oracle-check N={} FAILED at trial {} step {}: factorized {:?}, joint {:?}",
                config.households, m.trial, m.t, m.factorized, m.joint
            );
            Ok(Outcome::Fail)
        }
    }
}

// ---- audit ----

fn default_epsilon() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    62.5
}
fn default_samples() -> usize {
    1_000_000
}
fn default_bins() -> usize {
    200
}
fn default_min_count() -> u64 {
    DEFAULT_MIN_BIN_COUNT
}
fn default_delta() -> f64 {
    DEFAULT_AUDIT_DELTA
}

/// Audit config file. `lambda` defaults to the noise parameter chosen for a
/// belief with full support; `clip` defaults to the range holding all but
/// `e^-8` of the output mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub households: Vec<HouseholdBounds>,
    pub a: StateVector,
    pub b: StateVector,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub clip: Option<[f64; 2]>,
    #[serde(default = "default_min_count")]
    pub min_count: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
}

fn specs_from_bounds(bounds: &[HouseholdBounds]) -> blowfish_rtp::Result<Vec<HouseholdSpec>> {
    bounds
        .iter()
        .enumerate()
        .map(|(i, b)| HouseholdSpec::new(i, b.u_occupied, b.u_empty))
        .collect()
}

/// Noise parameter for a belief that rules out no state.
pub fn full_support_lambda(specs: &[HouseholdSpec], params: &PrivacyParams) -> blowfish_rtp::Result<f64> {
    let prior = Belief::factorized(0, BeliefKind::Prior, vec![0.5; specs.len()])?;
    blowfish_lambda(&[prior], specs, params)
}

/// Fill in defaults and apply flag overrides.
pub fn resolve_audit_config(args: &AuditArgs) -> Result<(AuditConfig, Vec<HouseholdSpec>, PrivacyParams), CliError> {
    let mut config: AuditConfig = serde_json::from_str(&read_text(&args.config)?).map_err(config_err)?;
    if let Some(s) = args.samples {
        config.samples = s;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = args.epsilon {
        config.epsilon = e;
    }
    let specs = specs_from_bounds(&config.households).map_err(config_err)?;
    if config.a.len() != specs.len() || config.b.len() != specs.len() {
        return Err(CliError::Config(format!(
            "states have {} and {} households, bounds list {}",
            config.a.len(),
            config.b.len(),
            specs.len()
        )));
    }
    let params = PrivacyParams::new(config.epsilon, config.alpha, config.beta).map_err(config_err)?;
    let lambda = match config.lambda {
        Some(l) if l >= 0.0 && l.is_finite() => l,
        Some(l) => return Err(CliError::Config(format!("lambda {l} must be finite and >= 0"))),
        None => full_support_lambda(&specs, &params).map_err(config_err)?,
    };
    config.lambda = Some(lambda);
    if config.clip.is_none() {
        let (lo, hi) = default_clip(&specs, &params, lambda);
        config.clip = Some([lo, hi]);
    }
    Ok((config, specs, params))
}

pub const AUDIT_REPORT: &str = "audit_report.json";

pub fn audit(args: &AuditArgs) -> Result<Outcome, CliError> {
    let (config, specs, params) = resolve_audit_config(args)?;
    let lambda = config.lambda.expect("resolved");
    let [lo, hi] = config.clip.expect("resolved");
    let spec = AuditSpec {
        a: config.a,
        b: config.b,
        samples: config.samples,
        bins: config.bins,
        clip_lo: lo,
        clip_hi: hi,
        min_count: config.min_count,
        delta: config.delta,
    };
    spec.validate().map_err(config_err)?;
    if !(args.slack >= 0.0) {
        return Err(CliError::Config("slack must be >= 0".into()));
    }
    let sampler = rate_sampler::<StreamRng>(&specs, params, lambda);
    let estimate = audit_epsilon(&spec, sampler, config.seed).map_err(runtime_err)?;
    let pass = estimate.epsilon_hat <= config.epsilon + args.slack;
    let report = AuditReport {
        epsilon_target: config.epsilon,
        epsilon_hat: estimate.epsilon_hat,
        samples: config.samples,
        bins: config.bins,
        pass,
        epsilon_point: estimate.epsilon_point,
        bins_used: estimate.bins_used,
        slack: args.slack,
        lambda,
    };
    prepare_out(&args.out)?;
    write_json(&args.out.join(AUDIT_REPORT), &report)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        config: &'a AuditConfig,
        slack: f64,
    }
    let resolved = Resolved {
        config: &config,
        slack: args.slack,
    };
    write_manifest(&args.out, "audit", &resolved, Some(config.seed), &[AUDIT_REPORT])?;
    println!(
        "audit {} vs {}: epsilon_hat {} (target {} + slack {}) {}",
        config.a,
        config.b,
        report.epsilon_hat,
        report.epsilon_target,
        report.slack,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { Outcome::Pass } else { Outcome::Fail })
}

// ---- track ----

/// Read `(r_hat, lambda)` pairs from a rates CSV.
pub fn read_rates(text: &str) -> Result<Vec<ObservedRate>, CliError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(config_err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let t_col = col("t").ok_or_else(|| CliError::Config("rates file has no `t` column".into()))?;
    let (r_col, l_col) = match (col("r_published"), col("lambda")) {
        (Some(r), Some(l)) => (r, l),
        _ => match (col("r_blowfish"), col("lambda_blowfish")) {
            (Some(r), Some(l)) => (r, l),
            _ => {
                return Err(CliError::Config(
                    "rates file needs r_published,lambda or r_blowfish,lambda_blowfish columns".into(),
                ))
            }
        },
    };
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(config_err)?;
        let field = |c: usize, what: &str| -> Result<f64, CliError> {
            let raw = record.get(c).unwrap_or("");
            raw.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("row {}: bad {what} {raw:?}", row + 1)))
        };
        let t = field(t_col, "t")?;
        if t != row as f64 {
            return Err(CliError::Config(format!("row {}: expected t = {row}, found {t}", row + 1)));
        }
        let r_hat = field(r_col, "rate")?;
        let lambda = field(l_col, "lambda")?;
        if !r_hat.is_finite() || !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(CliError::Config(format!("row {}: rate or lambda out of range", row + 1)));
        }
        out.push(ObservedRate { r_hat, lambda });
    }
    if out.is_empty() {
        return Err(CliError::Config("rates file holds no rows".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TrackConfig<'a> {
    rates_hash: String,
    model: &'a ModelDocument,
    epsilon: f64,
    alpha: f64,
    beta: f64,
    grid_points: usize,
}

pub const TRAJECTORY_CSV: &str = "trajectory.csv";

pub fn track(args: &TrackArgs) -> Result<Outcome, CliError> {
    let rates_text = read_text(&args.rates)?;
    let rates = read_rates(&rates_text)?;
    let doc = ModelDocument::from_json(&read_text(&args.model)?).map_err(config_err)?;
    let mut model = doc.to_model().map_err(config_err)?;
    let specs = doc
        .household_specs()
        .map_err(config_err)?
        .ok_or_else(|| CliError::Config("model file lists no household bounds".into()))?;
    if model.mode() == ModelMode::Factorized {
        model = expand_factorized(&model, DEFAULT_JOINT_LIMIT).map_err(config_err)?;
    }
    let params = PrivacyParams::new(args.epsilon, args.alpha, args.beta).map_err(config_err)?;
    let posteriors = adversary::track(&rates, &model, &specs, &params, args.grid_points, DEFAULT_JOINT_LIMIT)
        .map_err(|e| match e {
            blowfish_rtp::Error::Inconsistent(_) => runtime_err(e),
            other => config_err(other),
        })?;
    let mut buf = Vec::new();
    adversary::write_trajectory_csv(&mut buf, &posteriors).map_err(runtime_err)?;
    prepare_out(&args.out)?;
    write_atomic(&args.out.join(TRAJECTORY_CSV), &buf).map_err(runtime_err)?;
    let config = TrackConfig {
        rates_hash: hex::encode(Sha256::digest(rates_text.as_bytes())),
        model: &doc,
        epsilon: args.epsilon,
        alpha: args.alpha,
        beta: args.beta,
        grid_points: args.grid_points,
    };
    write_manifest(&args.out, "track", &config, None, &[TRAJECTORY_CSV])?;
    println!("tracked {} steps over {} states", posteriors.len(), 1usize << specs.len());
    Ok(Outcome::Pass)
}
