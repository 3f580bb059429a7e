//! Batch front-end: JSON experiment configs, the `analyze`, `sweep`,
//! `certify` and `simulate` commands, and their JSON/CSV outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cocycle::FactorSet;
use crate::error::Error;
use crate::linalg::{ext_real, rows};
use crate::lyapunov::{self, EstimateRow, Method, MomentMode};
use crate::projective::{self, SphereGrid};
use crate::regularity;
use crate::simulate::{self, EscapeConfig, SweepConfig};
use crate::task::{self, MinimumPoint, ModelKind, RegressionTask, MANIFOLD_TOLERANCE};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Analyze,
    Sweep,
    Certify,
    Simulate,
}

impl Experiment {
    fn name(self) -> &'static str {
        match self {
            Experiment::Analyze => "analyze",
            Experiment::Sweep => "sweep",
            Experiment::Certify => "certify",
            Experiment::Simulate => "simulate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: ModelKind,
    pub param_dim: usize,
    pub sample_count: usize,
    pub seed: u64,
    /// Linear tasks only: realize this Gram matrix exactly instead of sampling inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram: Option<Vec<Vec<f64>>>,
    /// Seed of the random starting point for the minimum search (0 starts at the origin).
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    #[serde(default = "default_steps")]
    pub n: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_moment_orders")]
    pub moment_p: Vec<f64>,
    #[serde(default = "default_irreducibility_trials")]
    pub irreducibility_trials: usize,
    /// Enumeration budget for exact moment exponents (sequences per probe direction).
    #[serde(default = "default_moment_budget")]
    pub moment_budget: u64,
}

fn default_steps() -> usize {
    lyapunov::DEFAULT_STEPS
}
fn default_trials() -> usize {
    lyapunov::DEFAULT_TRIALS
}
fn default_moment_orders() -> Vec<f64> {
    vec![-1.0, 1.0, 2.0]
}
fn default_irreducibility_trials() -> usize {
    128
}
fn default_moment_budget() -> u64 {
    1 << 16
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec {
            n: default_steps(),
            trials: default_trials(),
            seed: 0,
            moment_p: default_moment_orders(),
            irreducibility_trials: default_irreducibility_trials(),
            moment_budget: default_moment_budget(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySpec {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_p_grid")]
    pub p_grid: Vec<f64>,
    #[serde(default = "default_q_grid")]
    pub q_grid: Vec<f64>,
}

fn default_resolution() -> usize {
    2048
}
fn default_p_grid() -> Vec<f64> {
    projective::DEFAULT_P_GRID.to_vec()
}
fn default_q_grid() -> Vec<f64> {
    (-20..=20).map(|k| k as f64 * 0.1).collect()
}

impl Default for CertifySpec {
    fn default() -> Self {
        CertifySpec {
            resolution: default_resolution(),
            p_grid: default_p_grid(),
            q_grid: default_q_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escape: Option<EscapeConfig>,
    #[serde(default)]
    pub certify: CertifySpec,
    pub experiments: Vec<Experiment>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Precondition(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Precondition(_) => EXIT_PRECONDITION,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numerical(m) | CliError::Precondition(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NotOverparameterized { .. }
            | Error::InvalidArgument(_)
            | Error::NonSymmetric { .. } => CliError::Config(msg),
            Error::UnsupportedDimension(_) => CliError::Precondition(msg),
            _ => CliError::Numerical(msg),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let t = &self.task;
        if t.sample_count == 0 || t.param_dim == 0 {
            return Err(config_err("param_dim and sample_count must be positive"));
        }
        if t.sample_count >= t.param_dim {
            return Err(config_err(format!(
                "not overparameterized: sample_count {} must be below param_dim {}",
                t.sample_count, t.param_dim
            )));
        }
        if let Some(g) = &t.gram {
            if t.kind != ModelKind::Linear {
                return Err(config_err(
                    "an explicit gram is only supported for the linear kind",
                ));
            }
            if g.len() != t.sample_count || g.iter().any(|r| r.len() != t.sample_count) {
                return Err(config_err("gram must be sample_count x sample_count"));
            }
        }
        if let Some(eta) = self.eta {
            if !positive(eta) {
                return Err(config_err("eta must be positive"));
            }
        }
        if let Some(grid) = &self.eta_grid {
            if grid.iter().any(|e| !positive(*e)) {
                return Err(config_err("eta_grid entries must be positive"));
            }
        }
        let e = &self.estimator;
        if e.n == 0 || e.trials < 2 || e.irreducibility_trials == 0 {
            return Err(config_err(
                "estimator budgets must be positive (trials >= 2)",
            ));
        }
        if e.moment_p.iter().any(|p| !p.is_finite()) {
            return Err(config_err("moment orders must be finite"));
        }
        if let Some(esc) = &self.escape {
            if !(positive(esc.init_radius) && esc.init_radius < esc.ball_radius) || esc.trials == 0
            {
                return Err(config_err(
                    "escape needs 0 < init_radius < ball_radius and trials > 0",
                ));
            }
        }
        let c = &self.certify;
        if c.resolution < 3 || c.p_grid.is_empty() || c.p_grid.iter().any(|p| !positive(*p)) {
            return Err(config_err(
                "certify needs resolution >= 3 and a nonempty positive p_grid",
            ));
        }
        if self.experiments.is_empty() {
            return Err(config_err("experiments selection is empty"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (compact) serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    fn require_eta(&self) -> Result<f64, CliError> {
        self.eta.ok_or_else(|| config_err("this command needs eta"))
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "sgd-stability",
    version,
    about = "Linear stability of SGD at interpolation minima"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the one in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// μ, λ, spectrum, moment exponents and regularity at one learning rate.
    Analyze,
    /// Stability portrait over a learning-rate grid.
    Sweep,
    /// Projective drift certificate (N = 2 or 3).
    Certify,
    /// Escape experiment at one learning rate.
    Simulate,
}

impl Command {
    fn experiment(self) -> Experiment {
        match self {
            Command::Analyze => Experiment::Analyze,
            Command::Sweep => Experiment::Sweep,
            Command::Certify => Experiment::Certify,
            Command::Simulate => Experiment::Simulate,
        }
    }
}

/// Metadata written into every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub tool_version: String,
    pub config_hash: String,
}

impl Provenance {
    fn of(cfg: &ExperimentConfig) -> Self {
        Provenance {
            tool: "sgd-stability".into(),
            tool_version: TOOL_VERSION.into(),
            config_hash: cfg.hash(),
        }
    }
}

/// Task plus located minimum.
pub struct Prepared {
    pub task: RegressionTask,
    pub minimum: MinimumPoint,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let t = &cfg.task;
    let task = match &t.gram {
        Some(g) => {
            let g = rows::from_rows(g).map_err(config_err)?;
            RegressionTask::linear_from_gram(&g, t.param_dim, t.seed)?
        }
        None => RegressionTask::build(t.kind, t.param_dim, t.sample_count, t.seed)?,
    };
    let init = if t.init_seed == 0 {
        vec![0.0; t.param_dim]
    } else {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(t.init_seed);
        simulate::perturb(&mut rng, &vec![0.0; t.param_dim], 1.0)
    };
    let minimum = task::find_minimum(&task, &init, MANIFOLD_TOLERANCE)?;
    info!(
        "minimum found: loss {:e} after {} iterations",
        minimum.loss_value, minimum.iterations
    );
    Ok(Prepared { task, minimum })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    fs::write(dir.join(name), text + "\n")
        .map_err(|e| CliError::Numerical(format!("cannot write {name}: {e}")))
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Numerical(format!("cannot write {name}: {e}"));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(dir.join(name))
        .map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Numerical(e.to_string()))
}

/// Finite values as plain decimals, infinities and NaN as `inf`, `-inf`, `nan`.
fn fmt_real(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x}")
    }
}

#[derive(Serialize)]
struct EstimateCsvRow {
    quantity: String,
    value: String,
    std_error: String,
    n: usize,
    trials: usize,
    method: String,
    seed: String,
    config_hash: String,
    tool_version: String,
}

impl EstimateCsvRow {
    fn new(r: &EstimateRow, prov: &Provenance) -> Self {
        EstimateCsvRow {
            quantity: r.quantity.clone(),
            value: fmt_real(r.value),
            std_error: fmt_real(r.std_error),
            n: r.n,
            trials: r.trials,
            method: r.method.clone(),
            seed: r.seed.map(|s| s.to_string()).unwrap_or_default(),
            config_hash: prov.config_hash.clone(),
            tool_version: prov.tool_version.clone(),
        }
    }
}

#[derive(Serialize)]
struct TaskSummary {
    kind: ModelKind,
    param_dim: usize,
    sample_count: usize,
    input_dim: usize,
    seed: u64,
}

#[derive(Serialize)]
struct AnalysisOutput {
    #[serde(flatten)]
    provenance: Provenance,
    task: TaskSummary,
    eta: f64,
    minimum: MinimumPoint,
    manifold_check: task::ManifoldCheck,
    #[serde(with = "ext_real")]
    mu: f64,
    mu_equivalence: lyapunov::MuEquivalence,
    lambda: Vec<EstimateRow>,
    spectrum: Option<lyapunov::SpectrumEstimate>,
    spectrum_error: Option<String>,
    #[serde(with = "ext_real")]
    mean_log_det: f64,
    moments: Vec<lyapunov::MomentEstimate>,
    second_moment: lyapunov::SecondMomentVerdict,
    regularity: regularity::RegularityReport,
    contraction_witness: Option<regularity::ContractionWitness>,
    irreducibility: Option<regularity::IrreducibilityReport>,
}

pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let eta = cfg.require_eta()?;
    let prov = Provenance::of(cfg);
    let Prepared { task, minimum } = prepare(cfg)?;
    let est = &cfg.estimator;
    let gram = &minimum.gram;
    let factors = FactorSet::from_gram(gram, eta)?;
    let n_count = factors.len();

    let mu = lyapunov::mu(gram, eta)?;
    let mu_equivalence = lyapunov::mu_stability_equivalence(gram, eta)?;
    let mut lambda = Vec::new();
    for method in [Method::McNorm, Method::McVector] {
        lambda.push(
            lyapunov::lambda_mc(&factors, est.n, est.trials, est.seed, method)?.row("lambda"),
        );
    }
    let n_exact = est.n.min(lyapunov::max_enumerable_steps(
        n_count,
        lyapunov::ENUMERATION_BUDGET,
    ));
    if n_exact >= 1 {
        let v = lyapunov::lambda_exact(&factors, n_exact)?;
        lambda.push(lyapunov::LyapunovEstimate::exact(v, n_exact).row("lambda"));
    }
    info!("lambda estimates computed");
    let (spectrum, spectrum_error) =
        match lyapunov::oseledets_spectrum(&factors, est.n, est.trials, est.seed) {
            Ok(s) => (Some(s), None),
            Err(e @ Error::FrameCollapse { .. }) => (None, Some(e.to_string())),
            Err(e) => return Err(e.into()),
        };
    let n_moment = est
        .n
        .min(lyapunov::max_enumerable_steps(n_count, est.moment_budget));
    let (mode, n) = if n_moment >= 1 {
        (MomentMode::ExactEnum, n_moment)
    } else {
        (MomentMode::Mc, est.n)
    };
    let mut moments = Vec::new();
    for &p in &est.moment_p {
        moments.push(lyapunov::moment_lyapunov(
            &factors, p, n, mode, est.trials, est.seed,
        )?);
    }
    let second_moment = lyapunov::second_moment_verdict(&factors, n, est.trials, est.seed)?;
    let regularity = regularity::check_regular(gram, eta)?;
    let contraction_witness = regularity::contraction_witness(&factors);
    let irreducibility = if n_count >= 2 {
        Some(regularity::irreducibility_probe(
            &factors,
            est.irreducibility_trials,
            est.seed,
        )?)
    } else {
        None
    };

    let mut csv_rows: Vec<EstimateCsvRow> = Vec::new();
    let mu_row = EstimateRow {
        quantity: "mu".into(),
        value: mu,
        std_error: 0.0,
        n: 1,
        trials: 1,
        method: "exact".into(),
        seed: None,
    };
    csv_rows.push(EstimateCsvRow::new(&mu_row, &prov));
    for r in &lambda {
        csv_rows.push(EstimateCsvRow::new(r, &prov));
    }
    if let Some(s) = &spectrum {
        for (k, (v, se)) in s.exponents.iter().zip(&s.std_errors).enumerate() {
            let row = EstimateRow {
                quantity: format!("spectrum_{}", k + 1),
                value: *v,
                std_error: *se,
                n: s.n_steps,
                trials: s.trials,
                method: "qr".into(),
                seed: Some(s.seed),
            };
            csv_rows.push(EstimateCsvRow::new(&row, &prov));
        }
    }
    for m in &moments {
        let row = EstimateRow {
            quantity: format!("moment_p={}", m.p),
            value: m.value,
            std_error: m.std_error,
            n: m.n_steps,
            trials: m.trials,
            method: match m.mode {
                MomentMode::ExactEnum => "exact-enum".into(),
                MomentMode::Mc => "mc".into(),
            },
            seed: Some(est.seed),
        };
        csv_rows.push(EstimateCsvRow::new(&row, &prov));
    }

    let output = AnalysisOutput {
        provenance: prov,
        task: TaskSummary {
            kind: task.kind(),
            param_dim: task.param_dim(),
            sample_count: task.sample_count(),
            input_dim: task.input_dim(),
            seed: task.seed(),
        },
        eta,
        manifold_check: task::check_hypothesis_manifold(&minimum.s),
        minimum: minimum.clone(),
        mu,
        mu_equivalence,
        lambda,
        spectrum,
        spectrum_error,
        mean_log_det: lyapunov::mean_log_det(&factors),
        moments,
        second_moment,
        regularity,
        contraction_witness,
        irreducibility,
    };
    write_json(out, "analysis.json", &output)?;
    write_csv(out, "analysis.csv", &csv_rows)
}

#[derive(Serialize)]
struct SweepCsvRow {
    eta: f64,
    mu: String,
    lambda: String,
    lambda_std_error: String,
    escape_fraction: String,
    stay_count: String,
    escape_count: String,
    undecided_count: String,
    empirical_growth_rate: String,
    growth_rate_std_error: String,
    config_hash: String,
    tool_version: String,
}

#[derive(Serialize)]
struct SweepOutput {
    #[serde(flatten)]
    provenance: Provenance,
    table: simulate::SweepTable,
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let grid = cfg
        .eta_grid
        .as_ref()
        .ok_or_else(|| config_err("sweep needs eta_grid"))?;
    if grid.is_empty() {
        return Err(config_err("eta_grid is empty"));
    }
    let prov = Provenance::of(cfg);
    let Prepared { task, minimum } = prepare(cfg)?;
    let sweep_cfg = SweepConfig {
        n: cfg.estimator.n,
        trials: cfg.estimator.trials,
        seed: cfg.estimator.seed,
        escape: cfg.escape,
        bisection_steps: simulate::DEFAULT_BISECTION_STEPS,
    };
    let table = simulate::eta_sweep(&task, &minimum, grid, &sweep_cfg)?;
    let rows: Vec<SweepCsvRow> = table
        .rows
        .iter()
        .map(|r| {
            let esc = r.escape.as_ref();
            let opt =
                |f: &dyn Fn(&simulate::EscapeReport) -> String| esc.map(f).unwrap_or_default();
            SweepCsvRow {
                eta: r.eta,
                mu: fmt_real(r.mu),
                lambda: fmt_real(r.lambda),
                lambda_std_error: fmt_real(r.lambda_std_error),
                escape_fraction: opt(&|e| fmt_real(e.escape_fraction)),
                stay_count: opt(&|e| e.stay_and_converge_count.to_string()),
                escape_count: opt(&|e| e.escape_count.to_string()),
                undecided_count: opt(&|e| e.undecided_count.to_string()),
                empirical_growth_rate: opt(&|e| fmt_real(e.empirical_growth_rate)),
                growth_rate_std_error: opt(&|e| fmt_real(e.growth_rate_std_error)),
                config_hash: prov.config_hash.clone(),
                tool_version: prov.tool_version.clone(),
            }
        })
        .collect();
    write_csv(out, "sweep.csv", &rows)?;
    write_json(
        out,
        "sweep.json",
        &SweepOutput {
            provenance: prov,
            table,
        },
    )
}

#[derive(Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
enum CertificateRecord {
    Certified {
        certificate: projective::DriftCertificate,
    },
    NoCertificate {
        reason: String,
        explanation: String,
        curve: Vec<(f64, f64)>,
    },
}

#[derive(Serialize)]
struct CertifyOutput {
    #[serde(flatten)]
    provenance: Provenance,
    eta: f64,
    resolution: usize,
    lambda: EstimateRow,
    /// `(log r(ε) − log r(−ε)) / 2ε` at ε = 0.05.
    #[serde(with = "ext_real")]
    log_r_slope: f64,
    #[serde(with = "ext_real")]
    r_at_zero: f64,
    precondition_lambda_positive: bool,
    result: CertificateRecord,
}

#[derive(Serialize)]
struct CurveCsvRow {
    q: f64,
    r_q: String,
    config_hash: String,
    tool_version: String,
}

pub fn cmd_certify(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let n = cfg.task.sample_count;
    if !(2..=3).contains(&n) {
        return Err(CliError::Precondition(format!(
            "certify supports sample_count 2 or 3, got {n}"
        )));
    }
    let eta = cfg.require_eta()?;
    let prov = Provenance::of(cfg);
    let Prepared { minimum, .. } = prepare(cfg)?;
    let factors = FactorSet::from_gram(&minimum.gram, eta)?;
    let est = &cfg.estimator;
    let lambda = lyapunov::lambda_mc(&factors, est.n, est.trials, est.seed, Method::McNorm)?;
    let grid = SphereGrid::new(n, cfg.certify.resolution)?;
    let op = projective::TransferOperator::new(&grid, &factors)?;
    let tol = 1e-12;
    let r_at_zero = op.leading_eigen(0.0, tol)?.0;
    let slope = (op.leading_eigen(0.05, tol)?.0.ln() - op.leading_eigen(-0.05, tol)?.0.ln()) / 0.1;
    let curve_rows: Vec<CurveCsvRow> = cfg
        .certify
        .q_grid
        .iter()
        .map(|&q| {
            let r = op.leading_eigen(q, tol).map(|x| x.0).unwrap_or(f64::NAN);
            CurveCsvRow {
                q,
                r_q: fmt_real(r),
                config_hash: prov.config_hash.clone(),
                tool_version: prov.tool_version.clone(),
            }
        })
        .collect();
    let precondition = lambda.value > 0.0;
    let result = match projective::build_drift_certificate(&grid, &factors, &cfg.certify.p_grid) {
        Ok(certificate) => CertificateRecord::Certified { certificate },
        Err(Error::NoCertificate { reason, curve }) => CertificateRecord::NoCertificate {
            reason,
            explanation: if precondition {
                "lambda > 0 but no p on the grid certified; refine the grid or the p range".into()
            } else {
                "lambda <= 0: the minimum is not unstable, so no drift certificate is expected"
                    .into()
            },
            curve,
        },
        Err(e) => return Err(e.into()),
    };
    write_csv(out, "r_curve.csv", &curve_rows)?;
    write_json(
        out,
        "certificate.json",
        &CertifyOutput {
            provenance: prov,
            eta,
            resolution: grid.resolution(),
            lambda: lambda.row("lambda"),
            log_r_slope: slope,
            r_at_zero,
            precondition_lambda_positive: precondition,
            result,
        },
    )
}

#[derive(Serialize)]
struct EscapeCsvRow {
    class: String,
    count: usize,
    fraction: String,
    config_hash: String,
    tool_version: String,
}

#[derive(Serialize)]
struct EscapeOutput {
    #[serde(flatten)]
    provenance: Provenance,
    report: simulate::EscapeReport,
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let eta = cfg.require_eta()?;
    let prov = Provenance::of(cfg);
    let Prepared { task, minimum } = prepare(cfg)?;
    let esc = cfg.escape.unwrap_or_default();
    let report = simulate::escape_experiment(&task, &minimum, eta, &esc)?;
    let trials = report.trials as f64;
    let row = |class: &str, count: usize| EscapeCsvRow {
        class: class.into(),
        count,
        fraction: fmt_real(count as f64 / trials),
        config_hash: prov.config_hash.clone(),
        tool_version: prov.tool_version.clone(),
    };
    let rows = vec![
        row("stay-and-converge", report.stay_and_converge_count),
        row("escaped", report.escape_count),
        row("undecided", report.undecided_count),
    ];
    write_csv(out, "escape.csv", &rows)?;
    write_json(
        out,
        "escape.json",
        &EscapeOutput {
            provenance: prov,
            report,
        },
    )
}

/// Runs one command against a parsed config, writing into `out`.
pub fn execute(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    if !cfg.experiments.contains(&command.experiment()) {
        return Err(config_err(format!(
            "experiment '{}' is not selected in the config",
            command.experiment().name()
        )));
    }
    fs::create_dir_all(out)
        .map_err(|e| config_err(format!("cannot create {}: {e}", out.display())))?;
    match command {
        Command::Analyze => cmd_analyze(cfg, out),
        Command::Sweep => cmd_sweep(cfg, out),
        Command::Certify => cmd_certify(cfg, out),
        Command::Simulate => cmd_simulate(cfg, out),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    if let Some(k) = cli.threads {
        if k == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_CONFIG;
        }
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global();
    }
    let result = cli
        .config
        .as_deref()
        .ok_or_else(|| config_err("--config is required"))
        .and_then(ExperimentConfig::load)
        .and_then(|cfg| {
            let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
            execute(cli.command, &cfg, &out)
        });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
