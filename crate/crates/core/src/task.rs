//! Overparameterized scalar regression tasks, interpolating minima and their
//! gradient matrix `S` / NTK Gram matrix `G = SᵀS`.
//!
//! The loss is the square loss `ℓ(ẑ, z) = ½(ẑ − z)²`, so the empirical loss is
//! `L(x) = (1/N) Σᵢ ½ (F(x, yᵢ) − zᵢ)²`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, rows};

/// Loss at or below this value counts as "on the interpolation manifold".
pub const MANIFOLD_TOLERANCE: f64 = 1e-10;

/// Relative singular-value threshold for the linear-independence check.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Input dimension used by the random-feature model.
pub const RANDOM_FEATURE_INPUT_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// `F(x, y) = x·y`; the NTK is constant and `M` is an affine subspace.
    Linear,
    /// `F(x, y) = Σₖ xₖ tanh(wₖ·y + bₖ)` with frozen random `wₖ, bₖ`.
    RandomFeature,
    /// One hidden tanh layer: `F(x, y) = Σⱼ aⱼ tanh(Wⱼ·y + bⱼ) + c`.
    ShallowTanh,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::RandomFeature => "random-feature",
            ModelKind::ShallowTanh => "shallow-tanh",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Model {
    Linear,
    RandomFeature {
        weights: Vec<Vec<f64>>,
        biases: Vec<f64>,
    },
    ShallowTanh {
        width: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTask {
    kind: ModelKind,
    param_dim: usize,
    input_dim: usize,
    seed: u64,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    model: Model,
}

/// Picks `(input_dim, width)` with `(input_dim + 2)·width + 1 = D`, preferring
/// the smallest input dimension of at least two.
fn shallow_tanh_shape(param_dim: usize) -> Result<(usize, usize)> {
    if param_dim < 4 {
        return Err(invalid(format!(
            "shallow-tanh needs D >= 4 to fit (d+2)*width + 1 = D, got D = {param_dim}"
        )));
    }
    let m = param_dim - 1;
    let block = (4..=m).find(|k| m % k == 0).unwrap_or(3);
    if m % block != 0 {
        return Err(invalid(format!(
            "no shallow-tanh layout with D = {param_dim}"
        )));
    }
    Ok((block - 2, m / block))
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

impl RegressionTask {
    /// Builds a deterministic task from `(kind, D, N, seed)`. Inputs are standard
    /// normal and targets come from a random teacher parameter vector.
    pub fn build(
        kind: ModelKind,
        param_dim: usize,
        sample_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if sample_count == 0 {
            return Err(invalid("sample count must be positive"));
        }
        if sample_count >= param_dim {
            return Err(Error::NotOverparameterized {
                params: param_dim,
                samples: sample_count,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (input_dim, model) = match kind {
            ModelKind::Linear => (param_dim, Model::Linear),
            ModelKind::RandomFeature => {
                let d = RANDOM_FEATURE_INPUT_DIM;
                let weights = (0..param_dim).map(|_| normal_vec(&mut rng, d)).collect();
                let biases = normal_vec(&mut rng, param_dim);
                (d, Model::RandomFeature { weights, biases })
            }
            ModelKind::ShallowTanh => {
                let (d, width) = shallow_tanh_shape(param_dim)?;
                (d, Model::ShallowTanh { width })
            }
        };
        let inputs: Vec<Vec<f64>> = (0..sample_count)
            .map(|_| normal_vec(&mut rng, input_dim))
            .collect();
        let mut task = RegressionTask {
            kind,
            param_dim,
            input_dim,
            seed,
            inputs,
            targets: vec![0.0; sample_count],
            model,
        };
        let teacher = normal_vec(&mut rng, param_dim);
        task.targets = task.inputs.iter().map(|y| task.eval(&teacher, y)).collect();
        Ok(task)
    }

    /// Linear task whose Gram matrix is exactly `gram`: the inputs are the columns
    /// of `[Lᵀ; 0]` for the Cholesky factor `G = L Lᵀ`.
    pub fn linear_from_gram(gram: &DMatrix<f64>, param_dim: usize, seed: u64) -> Result<Self> {
        linalg::ensure_symmetric(gram)?;
        let n = gram.nrows();
        if n == 0 {
            return Err(invalid("empty Gram matrix"));
        }
        if n >= param_dim {
            return Err(Error::NotOverparameterized {
                params: param_dim,
                samples: n,
            });
        }
        let chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| invalid("Gram matrix must be positive definite"))?;
        let l = chol.l();
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut y = vec![0.0; param_dim];
                for (k, yk) in y.iter_mut().enumerate().take(n) {
                    *yk = l[(i, k)];
                }
                y
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = normal_vec(&mut rng, param_dim);
        let targets = inputs.iter().map(|y| linalg::dot(&teacher, y)).collect();
        Ok(RegressionTask {
            kind: ModelKind::Linear,
            param_dim,
            input_dim: param_dim,
            seed,
            inputs,
            targets,
            model: Model::Linear,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn sample_count(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Model output `F(x, y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.model {
            Model::Linear => linalg::dot(x, y),
            Model::RandomFeature { weights, biases } => weights
                .iter()
                .zip(biases)
                .zip(x)
                .map(|((w, b), xk)| xk * (linalg::dot(w, y) + b).tanh())
                .sum(),
            Model::ShallowTanh { width } => {
                let d = self.input_dim;
                let (w, rest) = x.split_at(width * d);
                let (b, rest) = rest.split_at(*width);
                let (a, c) = rest.split_at(*width);
                let hidden: f64 = (0..*width)
                    .map(|j| a[j] * (linalg::dot(&w[j * d..(j + 1) * d], y) + b[j]).tanh())
                    .sum();
                hidden + c[0]
            }
        }
    }

    /// Writes `∇ₓF(x, y)` into `out`.
    pub fn gradient_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match &self.model {
            Model::Linear => out.copy_from_slice(y),
            Model::RandomFeature { weights, biases } => {
                for ((o, w), b) in out.iter_mut().zip(weights).zip(biases) {
                    *o = (linalg::dot(w, y) + b).tanh();
                }
            }
            Model::ShallowTanh { width } => {
                let width = *width;
                let d = self.input_dim;
                let b_off = width * d;
                let a_off = b_off + width;
                for j in 0..width {
                    let pre = linalg::dot(&x[j * d..(j + 1) * d], y) + x[b_off + j];
                    let t = pre.tanh();
                    let a = x[a_off + j];
                    let slope = a * (1.0 - t * t);
                    for k in 0..d {
                        out[j * d + k] = slope * y[k];
                    }
                    out[b_off + j] = slope;
                    out[a_off + j] = t;
                }
                out[a_off + width] = 1.0;
            }
        }
    }

    pub fn gradient(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.param_dim];
        self.gradient_into(x, y, &mut g);
        g
    }

    /// Residual `F(x, yᵢ) − zᵢ` of one sample.
    pub fn residual(&self, x: &[f64], i: usize) -> f64 {
        self.eval(x, &self.inputs[i]) - self.targets[i]
    }

    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        (0..self.sample_count())
            .map(|i| self.residual(x, i))
            .collect()
    }

    /// Empirical loss `L(x)`.
    pub fn loss(&self, x: &[f64]) -> f64 {
        let r = self.residuals(x);
        0.5 * r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
    }

    /// `∇Lᵢ(x)` written into `out`; returns the residual of sample `i`.
    pub fn sample_loss_gradient_into(&self, x: &[f64], i: usize, out: &mut [f64]) -> f64 {
        let y = &self.inputs[i];
        let r = self.eval(x, y) - self.targets[i];
        self.gradient_into(x, y, out);
        for o in out.iter_mut() {
            *o *= r;
        }
        r
    }

    /// `∇L(x)` written into `out` (uses `scratch` of length D).
    pub fn loss_gradient_into(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        out.fill(0.0);
        let n = self.sample_count() as f64;
        for i in 0..self.sample_count() {
            let r = self.sample_loss_gradient_into(x, i, scratch);
            if r != 0.0 {
                for (o, s) in out.iter_mut().zip(scratch.iter()) {
                    *o += s / n;
                }
            }
        }
    }

    pub fn loss_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.param_dim];
        let mut scratch = vec![0.0; self.param_dim];
        self.loss_gradient_into(x, &mut out, &mut scratch);
        out
    }

    /// The `D × N` matrix whose i-th column is `∇ₓF(x, yᵢ)`.
    pub fn gradient_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.param_dim, self.sample_count());
        let mut g = vec![0.0; self.param_dim];
        for (i, y) in self.inputs.iter().enumerate() {
            self.gradient_into(x, y, &mut g);
            s.column_mut(i).copy_from_slice(&g);
        }
        s
    }

    pub fn to_document(&self) -> TaskDocument {
        TaskDocument {
            kind: self.kind,
            param_dim: self.param_dim,
            sample_count: self.sample_count(),
            input_dim: self.input_dim,
            seed: self.seed,
            inputs: self.inputs.clone(),
            targets: self.targets.clone(),
        }
    }

    /// Rebuilds a task from its document. Frozen model internals (random
    /// features) are regenerated from the seed; data is taken verbatim.
    pub fn from_document(doc: &TaskDocument) -> Result<Self> {
        if doc.inputs.len() != doc.sample_count || doc.targets.len() != doc.sample_count {
            return Err(invalid("inputs/targets length does not match sample_count"));
        }
        if doc.sample_count >= doc.param_dim {
            return Err(Error::NotOverparameterized {
                params: doc.param_dim,
                samples: doc.sample_count,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(doc.seed);
        let (input_dim, model) = match doc.kind {
            ModelKind::Linear => (doc.param_dim, Model::Linear),
            ModelKind::RandomFeature => {
                let d = RANDOM_FEATURE_INPUT_DIM;
                let weights = (0..doc.param_dim)
                    .map(|_| normal_vec(&mut rng, d))
                    .collect();
                let biases = normal_vec(&mut rng, doc.param_dim);
                (d, Model::RandomFeature { weights, biases })
            }
            ModelKind::ShallowTanh => {
                let (d, width) = shallow_tanh_shape(doc.param_dim)?;
                (d, Model::ShallowTanh { width })
            }
        };
        if input_dim != doc.input_dim || doc.inputs.iter().any(|y| y.len() != input_dim) {
            return Err(invalid(format!("inputs must have dimension {input_dim}")));
        }
        Ok(RegressionTask {
            kind: doc.kind,
            param_dim: doc.param_dim,
            input_dim,
            seed: doc.seed,
            inputs: doc.inputs.clone(),
            targets: doc.targets.clone(),
            model,
        })
    }
}

/// JSON form of a task: kind, dimensions, seed and explicit data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDocument {
    pub kind: ModelKind,
    pub param_dim: usize,
    pub sample_count: usize,
    pub input_dim: usize,
    pub seed: u64,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

pub fn build_task(
    kind: ModelKind,
    param_dim: usize,
    sample_count: usize,
    seed: u64,
) -> Result<RegressionTask> {
    RegressionTask::build(kind, param_dim, sample_count, seed)
}

/// A point on (or numerically near) the zero-loss manifold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimumPoint {
    pub x_star: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Column i is `∇ₓF(x*, yᵢ)`.
    #[serde(with = "rows")]
    pub s: DMatrix<f64>,
    /// `G = SᵀS`.
    #[serde(with = "rows")]
    pub gram: DMatrix<f64>,
    pub loss_value: f64,
    pub iterations: usize,
}

impl MinimumPoint {
    /// Evaluates residuals, `S` and `G` at `x`.
    pub fn at(task: &RegressionTask, x: Vec<f64>, iterations: usize) -> Self {
        let residuals = task.residuals(&x);
        let s = task.gradient_matrix(&x);
        let gram = s.transpose() * &s;
        let gram = (&gram + gram.transpose()) * 0.5;
        let loss_value =
            0.5 * residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
        MinimumPoint {
            x_star: x,
            residuals,
            s,
            gram,
            loss_value,
            iterations,
        }
    }

    pub fn on_manifold(&self) -> bool {
        self.loss_value <= MANIFOLD_TOLERANCE
    }

    pub fn max_abs_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

const GD_MAX_ITERS: usize = 2000;
const GD_SWITCH_LOSS: f64 = 1e-6;
const GN_MAX_ITERS: usize = 200;

/// Minimum-norm Gauss–Newton step `−S (G + damping·𝟙)⁻¹ r`.
fn gauss_newton_step(s: &DMatrix<f64>, residuals: &[f64]) -> Option<Vec<f64>> {
    let gram = s.transpose() * s;
    let n = gram.nrows();
    let r = nalgebra::DVector::from_column_slice(residuals);
    let mut damping = 0.0;
    for _ in 0..8 {
        let shifted = &gram + DMatrix::identity(n, n) * damping;
        if let Some(chol) = shifted.cholesky() {
            let coeff = chol.solve(&r);
            let step = -(s * coeff);
            return Some(step.iter().copied().collect());
        }
        damping = if damping == 0.0 {
            1e-12 * gram.trace().max(1e-300)
        } else {
            damping * 100.0
        };
    }
    None
}

/// Locates a point with loss ≤ `tol`: backtracking gradient descent followed by
/// damped Gauss–Newton on the residual vector.
pub fn find_minimum(task: &RegressionTask, init: &[f64], tol: f64) -> Result<MinimumPoint> {
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if init.len() != task.param_dim() {
        return Err(invalid(format!(
            "init has length {}, expected {}",
            init.len(),
            task.param_dim()
        )));
    }
    let mut x = init.to_vec();
    let mut loss = task.loss(&x);
    if loss <= tol {
        return Ok(MinimumPoint::at(task, x, 0));
    }
    let mut iterations = 0;
    let mut step = 1.0;
    let mut grad = vec![0.0; task.param_dim()];
    let mut scratch = vec![0.0; task.param_dim()];
    let mut trial = vec![0.0; task.param_dim()];

    while iterations < GD_MAX_ITERS && loss > GD_SWITCH_LOSS.max(tol) {
        iterations += 1;
        task.loss_gradient_into(&x, &mut grad, &mut scratch);
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if g2 == 0.0 {
            break;
        }
        step *= 2.0;
        let mut accepted = false;
        for _ in 0..60 {
            for ((t, xi), gi) in trial.iter_mut().zip(&x).zip(&grad) {
                *t = xi - step * gi;
            }
            let new_loss = task.loss(&trial);
            if new_loss <= loss - 0.5 * step * g2 {
                x.copy_from_slice(&trial);
                loss = new_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let mut gn_iters = 0;
    while loss > tol && gn_iters < GN_MAX_ITERS {
        gn_iters += 1;
        iterations += 1;
        let s = task.gradient_matrix(&x);
        let r = task.residuals(&x);
        let Some(dx) = gauss_newton_step(&s, &r) else {
            break;
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            for ((tr, xi), di) in trial.iter_mut().zip(&x).zip(&dx) {
                *tr = xi + t * di;
            }
            let new_loss = task.loss(&trial);
            if new_loss < loss {
                x.copy_from_slice(&trial);
                loss = new_loss;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }

    if loss <= tol {
        Ok(MinimumPoint::at(task, x, iterations))
    } else {
        Err(Error::NonConvergence {
            best_loss: loss,
            iterations,
        })
    }
}

/// Outcome of the linear-independence check on the columns of `S`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum ManifoldCheck {
    Pass { min_singular_value: f64 },
    Fail { min_singular_value: f64 },
}

impl ManifoldCheck {
    pub fn passed(&self) -> bool {
        matches!(self, ManifoldCheck::Pass { .. })
    }

    pub fn min_singular_value(&self) -> f64 {
        match *self {
            ManifoldCheck::Pass { min_singular_value }
            | ManifoldCheck::Fail { min_singular_value } => min_singular_value,
        }
    }
}

/// Passes iff `σ_min(S) > RANK_TOLERANCE · σ_max(S)`.
pub fn check_hypothesis_manifold(s: &DMatrix<f64>) -> ManifoldCheck {
    if s.ncols() == 0 {
        return ManifoldCheck::Fail {
            min_singular_value: 0.0,
        };
    }
    let sv = linalg::singular_values(s);
    // more columns than rows: the remaining singular values are zero
    let min = if s.ncols() > s.nrows() {
        0.0
    } else {
        *sv.last().unwrap()
    };
    let max = sv[0];
    if max > 0.0 && min > RANK_TOLERANCE * max {
        ManifoldCheck::Pass {
            min_singular_value: min,
        }
    } else {
        ManifoldCheck::Fail {
            min_singular_value: min,
        }
    }
}
