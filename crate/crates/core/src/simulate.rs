//! Exact GD/SGD dynamics from seeded initializations and the escape / sweep
//! experiments built on them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{FactorSet, SeedStream};
use crate::error::{invalid, Result};
use crate::linalg::{self, ext_real};
use crate::lyapunov::{self, Method};
use crate::task::{MinimumPoint, ModelKind, RegressionTask, MANIFOLD_TOLERANCE};

pub const DEFAULT_STRIDE: usize = 16;
pub const DEFAULT_HORIZON: usize = 100_000;
/// Iterates beyond this norm count as numerical overflow.
pub const OVERFLOW_NORM: f64 = 1e100;
/// Steps discarded before measuring log-distance growth.
pub const GROWTH_BURN_IN: usize = 10;
pub const DEFAULT_BISECTION_STEPS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Termination {
    Converged { loss: f64 },
    Escaped { radius: f64, overflow: bool },
    Horizon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Every `stride`-th iterate plus the last one.
    pub points: Vec<Vec<f64>>,
    /// `L` at each stored point.
    pub losses: Vec<f64>,
    /// Step number of each stored point.
    pub recorded_steps: Vec<usize>,
    pub stride: usize,
    pub steps: usize,
    pub termination: Termination,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.points
            .last()
            .expect("trajectory stores the initial point")
    }
}

/// Early-termination rules for [`run_gd`] / [`run_sgd`]. The default never stops early.
#[derive(Clone, Debug, PartialEq)]
pub struct Monitor {
    pub center: Option<Vec<f64>>,
    pub escape_radius: Option<f64>,
    pub converge_loss: Option<f64>,
    pub stride: usize,
}

impl Default for Monitor {
    fn default() -> Self {
        Monitor {
            center: None,
            escape_radius: None,
            converge_loss: None,
            stride: DEFAULT_STRIDE,
        }
    }
}

impl Monitor {
    /// Stops on loss below the manifold tolerance or on leaving the ball around `center`.
    pub fn escape(center: &[f64], radius: f64) -> Self {
        Monitor {
            center: Some(center.to_vec()),
            escape_radius: Some(radius),
            converge_loss: Some(MANIFOLD_TOLERANCE),
            stride: DEFAULT_STRIDE,
        }
    }

    fn check(&self, x: &[f64], loss: f64) -> Option<Termination> {
        let nrm = linalg::norm(x);
        if !(nrm <= OVERFLOW_NORM) {
            return Some(Termination::Escaped {
                radius: nrm,
                overflow: true,
            });
        }
        if let (Some(c), Some(r)) = (&self.center, self.escape_radius) {
            let d = x
                .iter()
                .zip(c)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d > r {
                return Some(Termination::Escaped {
                    radius: d,
                    overflow: false,
                });
            }
        }
        match self.converge_loss {
            Some(tol) if loss < tol => Some(Termination::Converged { loss }),
            _ => None,
        }
    }
}

fn run<F>(
    task: &RegressionTask,
    x0: &[f64],
    horizon: usize,
    monitor: &Monitor,
    mut step: F,
) -> Result<Trajectory>
where
    F: FnMut(usize, &mut Vec<f64>, &mut [f64], &mut [f64]),
{
    if horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    if x0.len() != task.param_dim() {
        return Err(invalid(format!(
            "initial point must have length {}",
            task.param_dim()
        )));
    }
    let stride = monitor.stride.max(1);
    let d = task.param_dim();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut traj = Trajectory {
        points: Vec::new(),
        losses: Vec::new(),
        recorded_steps: Vec::new(),
        stride,
        steps: 0,
        termination: Termination::Horizon,
    };
    let mut t = 0;
    loop {
        let loss = task.loss(&x);
        let stop = monitor.check(&x, loss);
        if t % stride == 0 || t == horizon || stop.is_some() {
            traj.points.push(x.clone());
            traj.losses.push(loss);
            traj.recorded_steps.push(t);
        }
        if let Some(term) = stop {
            traj.termination = term;
            break;
        }
        if t == horizon {
            break;
        }
        step(t, &mut x, &mut grad, &mut scratch);
        t += 1;
    }
    traj.steps = t;
    Ok(traj)
}

/// Full-batch gradient descent `x ← x − η∇L(x)`.
pub fn run_gd(
    task: &RegressionTask,
    x0: &[f64],
    eta: f64,
    horizon: usize,
    monitor: &Monitor,
) -> Result<Trajectory> {
    run(task, x0, horizon, monitor, |_, x, grad, scratch| {
        task.loss_gradient_into(x, grad, scratch);
        for (xi, g) in x.iter_mut().zip(grad.iter()) {
            *xi -= eta * g;
        }
    })
}

/// SGD `x ← x − η∇L_{ξ}(x)` with `ξ` drawn from `stream`.
pub fn run_sgd(
    task: &RegressionTask,
    x0: &[f64],
    eta: f64,
    horizon: usize,
    stream: &SeedStream,
    monitor: &Monitor,
) -> Result<Trajectory> {
    let n = task.sample_count();
    run(task, x0, horizon, monitor, |t, x, grad, _| {
        let i = stream.index(t as u64, n);
        task.sample_loss_gradient_into(x, i, grad);
        for (xi, g) in x.iter_mut().zip(grad.iter()) {
            *xi -= eta * g;
        }
    })
}

/// Normal coordinates `c` of `x` around a minimum, defined by `x − x* ≈ S c + tangent`,
/// i.e. `c = G⁻¹Sᵀ(x − x*)`. On the linear task they evolve exactly by the factors `𝟙 − ηG_[i]`.
pub fn normal_coordinates(min: &MinimumPoint, x: &[f64]) -> Result<Vec<f64>> {
    let e = DVector::from_iterator(x.len(), x.iter().zip(&min.x_star).map(|(a, b)| a - b));
    let w = min.s.transpose() * e;
    let chol = min
        .gram
        .clone()
        .cholesky()
        .ok_or_else(|| invalid("Gram matrix is not positive definite"))?;
    Ok(chol.solve(&w).iter().copied().collect())
}

/// How distance to the zero-loss manifold is measured.
#[derive(Clone, Debug)]
enum DistanceModel {
    /// Linear model: `dist(x, M)² = rᵀG⁻¹r` exactly.
    Exact(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    /// Nonlinear models: first-order surrogate `‖r‖ / σ_min(S*)`.
    Surrogate(f64),
}

impl DistanceModel {
    fn for_minimum(task: &RegressionTask, min: &MinimumPoint) -> Result<Self> {
        if task.kind() == ModelKind::Linear {
            let chol = min
                .gram
                .clone()
                .cholesky()
                .ok_or_else(|| invalid("Gram matrix is not positive definite"))?;
            Ok(DistanceModel::Exact(chol))
        } else {
            let smin = linalg::min_singular_value(&min.s);
            if smin <= 0.0 {
                return Err(invalid("gradient matrix is rank deficient at the minimum"));
            }
            Ok(DistanceModel::Surrogate(smin))
        }
    }

    fn label(&self) -> &'static str {
        match self {
            DistanceModel::Exact(_) => "exact-affine",
            DistanceModel::Surrogate(_) => "surrogate",
        }
    }

    fn distance(&self, residuals: &[f64]) -> f64 {
        match self {
            DistanceModel::Exact(chol) => {
                let r = DVector::from_column_slice(residuals);
                r.dot(&chol.solve(&r)).max(0.0).sqrt()
            }
            DistanceModel::Surrogate(smin) => linalg::norm(residuals) / smin,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeConfig {
    pub init_radius: f64,
    pub ball_radius: f64,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        EscapeConfig {
            init_radius: 0.1,
            ball_radius: 10.0,
            horizon: DEFAULT_HORIZON,
            trials: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeReport {
    pub eta: f64,
    pub trials: usize,
    pub init_radius: f64,
    pub ball_radius: f64,
    pub horizon: usize,
    pub seed: u64,
    pub stay_and_converge_count: usize,
    pub escape_count: usize,
    pub undecided_count: usize,
    /// Fractions among decided trials; undecided ones are excluded.
    #[serde(with = "ext_real")]
    pub stay_fraction: f64,
    #[serde(with = "ext_real")]
    pub escape_fraction: f64,
    /// `Σ(log d_end − log d_burn) / Σ(steps after burn-in)` over trials.
    #[serde(with = "ext_real")]
    pub empirical_growth_rate: f64,
    pub growth_rate_std_error: f64,
    pub growth_trials: usize,
    pub distance_model: String,
    /// Initial points are uniform in the ball of radius `init_radius` around x*.
    pub initialization: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Stay,
    Escape,
    Undecided,
}

struct TrialResult {
    outcome: Outcome,
    /// `(log d_end − log d_burn, steps)` when the trial outlived the burn-in.
    growth: Option<(f64, f64)>,
}

fn uniform_ball<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let dir = linalg::random_unit_vector(rng, dim);
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / dim as f64);
    dir.into_iter().map(|v| v * r).collect()
}

fn escape_trial(
    task: &RegressionTask,
    min: &MinimumPoint,
    dist: &DistanceModel,
    eta: f64,
    cfg: &EscapeConfig,
    trial: u64,
) -> TrialResult {
    let stream = SeedStream::for_trial(cfg.seed, trial);
    let mut rng = stream.aux_rng();
    let offset = uniform_ball(&mut rng, task.param_dim(), cfg.init_radius);
    let mut x: Vec<f64> = min.x_star.iter().zip(&offset).map(|(a, b)| a + b).collect();
    let mut grad = vec![0.0; x.len()];
    let n = task.sample_count();
    let ball2 = cfg.ball_radius * cfg.ball_radius;
    let mut burn_log: Option<f64> = None;
    let mut outcome = Outcome::Undecided;
    let mut last_log = f64::NAN;
    let mut t = 0;
    loop {
        let residuals = task.residuals(&x);
        let loss = 0.5 * residuals.iter().map(|r| r * r).sum::<f64>() / n as f64;
        let d = dist.distance(&residuals);
        last_log = if d > 0.0 { d.ln() } else { last_log };
        if t == GROWTH_BURN_IN && d > 0.0 {
            burn_log = Some(d.ln());
        }
        let center2: f64 = x
            .iter()
            .zip(&min.x_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if !(center2 <= ball2) {
            outcome = Outcome::Escape;
            break;
        }
        if loss < MANIFOLD_TOLERANCE {
            outcome = Outcome::Stay;
            break;
        }
        if t == cfg.horizon {
            break;
        }
        let i = stream.index(t as u64, n);
        task.sample_loss_gradient_into(&x, i, &mut grad);
        for (xi, g) in x.iter_mut().zip(&grad) {
            *xi -= eta * g;
        }
        t += 1;
    }
    let growth = match burn_log {
        Some(b) if t > GROWTH_BURN_IN && last_log.is_finite() => {
            Some((last_log - b, (t - GROWTH_BURN_IN) as f64))
        }
        _ => None,
    };
    TrialResult { outcome, growth }
}

/// Runs SGD from `trials` random points near `x*` and classifies each run as
/// converged inside the ball, escaped from it, or undecided at the horizon.
pub fn escape_experiment(
    task: &RegressionTask,
    min: &MinimumPoint,
    eta: f64,
    cfg: &EscapeConfig,
) -> Result<EscapeReport> {
    if !(eta > 0.0) {
        return Err(invalid("learning rate must be positive"));
    }
    if !(cfg.init_radius > 0.0 && cfg.init_radius < cfg.ball_radius) {
        return Err(invalid("need 0 < init_radius < ball_radius"));
    }
    if !min.on_manifold() {
        return Err(invalid(format!(
            "x* has loss {:e} above the manifold tolerance",
            min.loss_value
        )));
    }
    let dist = DistanceModel::for_minimum(task, min)?;
    let results: Vec<TrialResult> = if cfg.horizon == 0 {
        (0..cfg.trials)
            .map(|_| TrialResult {
                outcome: Outcome::Undecided,
                growth: None,
            })
            .collect()
    } else {
        (0..cfg.trials as u64)
            .into_par_iter()
            .map(|t| escape_trial(task, min, &dist, eta, cfg, t))
            .collect()
    };
    let count = |o: Outcome| results.iter().filter(|r| r.outcome == o).count();
    let (stay, escape, undecided) = (
        count(Outcome::Stay),
        count(Outcome::Escape),
        count(Outcome::Undecided),
    );
    let decided = (stay + escape) as f64;
    let growth: Vec<(f64, f64)> = results.iter().filter_map(|r| r.growth).collect();
    let (rate, se) = ratio_estimate(&growth);
    Ok(EscapeReport {
        eta,
        trials: cfg.trials,
        init_radius: cfg.init_radius,
        ball_radius: cfg.ball_radius,
        horizon: cfg.horizon,
        seed: cfg.seed,
        stay_and_converge_count: stay,
        escape_count: escape,
        undecided_count: undecided,
        stay_fraction: stay as f64 / decided,
        escape_fraction: escape as f64 / decided,
        empirical_growth_rate: rate,
        growth_rate_std_error: se,
        growth_trials: growth.len(),
        distance_model: dist.label().to_string(),
        initialization: format!("uniform in ball of radius {} around x*", cfg.init_radius),
    })
}

/// Ratio estimator `ΣA / ΣT` with delta-method standard error.
fn ratio_estimate(pairs: &[(f64, f64)]) -> (f64, f64) {
    if pairs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let t: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (sa, st) = (linalg::pairwise_sum(&a), linalg::pairwise_sum(&t));
    let rate = sa / st;
    if pairs.len() < 2 {
        return (rate, f64::NAN);
    }
    let dev: Vec<f64> = pairs.iter().map(|(a, t)| (a - rate * t).powi(2)).collect();
    let k = pairs.len() as f64;
    (
        rate,
        (linalg::pairwise_sum(&dev) * k / (k - 1.0)).sqrt() / st,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    pub escape: Option<EscapeConfig>,
    pub bisection_steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n: lyapunov::DEFAULT_STEPS,
            trials: lyapunov::DEFAULT_TRIALS,
            seed: 0,
            escape: None,
            bisection_steps: DEFAULT_BISECTION_STEPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    #[serde(with = "ext_real")]
    pub mu: f64,
    #[serde(with = "ext_real")]
    pub lambda: f64,
    pub lambda_std_error: f64,
    pub escape: Option<EscapeReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub eta_low: f64,
    pub eta_high: f64,
    pub eta_estimate: f64,
    /// λ at the two ends of the final bracket.
    pub lambda_low: f64,
    pub lambda_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub crossings: Vec<Crossing>,
}

fn lambda_at(gram: &DMatrix<f64>, eta: f64, cfg: &SweepConfig) -> Result<(f64, f64)> {
    let factors = FactorSet::from_gram(gram, eta)?;
    let est = lyapunov::lambda_mc(&factors, cfg.n, cfg.trials, cfg.seed, Method::McNorm)?;
    Ok((est.value, est.std_error))
}

/// μ, λ and optionally escape statistics on a grid of learning rates, with
/// bisection between neighbours where λ changes sign.
pub fn eta_sweep(
    task: &RegressionTask,
    min: &MinimumPoint,
    eta_grid: &[f64],
    cfg: &SweepConfig,
) -> Result<SweepTable> {
    if eta_grid.is_empty() {
        return Err(invalid("learning-rate grid is empty"));
    }
    let mut grid = eta_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(grid.len());
    for &eta in &grid {
        let (lambda, lambda_std_error) = lambda_at(&min.gram, eta, cfg)?;
        let escape = match &cfg.escape {
            Some(e) => Some(escape_experiment(task, min, eta, e)?),
            None => None,
        };
        rows.push(SweepRow {
            eta,
            mu: lyapunov::mu(&min.gram, eta)?,
            lambda,
            lambda_std_error,
            escape,
        });
    }
    let mut crossings = Vec::new();
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if (a.lambda < 0.0) == (b.lambda < 0.0) {
            continue;
        }
        let (mut lo, mut hi) = (a.eta, b.eta);
        let (mut llo, mut lhi) = (a.lambda, b.lambda);
        for _ in 0..cfg.bisection_steps {
            let mid = 0.5 * (lo + hi);
            let (lm, _) = lambda_at(&min.gram, mid, cfg)?;
            if (lm < 0.0) == (llo < 0.0) {
                lo = mid;
                llo = lm;
            } else {
                hi = mid;
                lhi = lm;
            }
        }
        crossings.push(Crossing {
            eta_low: lo,
            eta_high: hi,
            eta_estimate: 0.5 * (lo + hi),
            lambda_low: llo,
            lambda_high: lhi,
        });
    }
    Ok(SweepTable { rows, crossings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub dtype: String,
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub steps: usize,
    pub recorded_steps: Vec<usize>,
    pub losses: Vec<f64>,
    pub termination: Termination,
}

/// Binary dump: `u64` little-endian header length, JSON header, then the
/// stored points as row-major little-endian `f64`.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let header = TrajectoryHeader {
        dtype: "f64le".into(),
        rows: traj.points.len(),
        cols: traj.points.first().map_or(0, Vec::len),
        stride: traj.stride,
        steps: traj.steps,
        recorded_steps: traj.recorded_steps.clone(),
        losses: traj.losses.clone(),
        termination: traj.termination,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in &traj.points {
        for v in p {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let h: TrajectoryHeader = serde_json::from_slice(&json)?;
    let mut points = Vec::with_capacity(h.rows);
    let mut buf = [0u8; 8];
    for _ in 0..h.rows {
        let mut row = Vec::with_capacity(h.cols);
        for _ in 0..h.cols {
            r.read_exact(&mut buf)?;
            row.push(f64::from_le_bytes(buf));
        }
        points.push(row);
    }
    Ok(Trajectory {
        points,
        losses: h.losses,
        recorded_steps: h.recorded_steps,
        stride: h.stride,
        steps: h.steps,
        termination: h.termination,
    })
}

/// A standard-normal perturbation of `x` with norm `radius`.
pub fn perturb<R: Rng>(rng: &mut R, x: &[f64], radius: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
    let n = linalg::norm(&v);
    x.iter().zip(&v).map(|(a, b)| a + radius * b / n).collect()
}
