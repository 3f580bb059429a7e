//! Stability exponents: the GD quantity μ, the top Lyapunov exponent λ
//! (exact enumeration and Monte Carlo), the Oseledets spectrum and moment
//! Lyapunov exponents Λ_p.

use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{product_log_norm, sample_product, FactorSet, SeedStream};
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, ext_real, mix64};

pub const ENUMERATION_BUDGET: u64 = 10_000_000;
pub const DEFAULT_STEPS: usize = 64;
pub const DEFAULT_TRIALS: usize = 4096;

/// Random directions added to the Λ_p probe set.
const RANDOM_PROBES: usize = 8;

/// Smallest band used for sign verdicts when an estimate carries no sampling error.
const VERDICT_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    McNorm,
    McVector,
    ExactEnum,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::McNorm => "mc-norm",
            Method::McVector => "mc-vector",
            Method::ExactEnum => "exact-enum",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    #[serde(with = "ext_real")]
    pub value: f64,
    pub std_error: f64,
    pub n_steps: usize,
    pub trials: usize,
    pub method: Method,
    pub seed: Option<u64>,
    /// Trials whose product annihilated the tracked direction (log norm = −∞).
    pub annihilated: usize,
}

/// One row of the tabular estimate output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub quantity: String,
    #[serde(with = "ext_real")]
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    pub trials: usize,
    pub method: String,
    pub seed: Option<u64>,
}

impl LyapunovEstimate {
    pub fn exact(value: f64, n_steps: usize) -> Self {
        LyapunovEstimate {
            value,
            std_error: 0.0,
            n_steps,
            trials: 1,
            method: Method::ExactEnum,
            seed: None,
            annihilated: 0,
        }
    }

    pub fn row(&self, quantity: &str) -> EstimateRow {
        EstimateRow {
            quantity: quantity.to_string(),
            value: self.value,
            std_error: self.std_error,
            n: self.n_steps,
            trials: self.trials,
            method: self.method.to_string(),
            seed: self.seed,
        }
    }
}

fn check_gram_for_mu(gram: &DMatrix<f64>, eta: f64) -> Result<()> {
    linalg::ensure_symmetric(gram)?;
    if gram.nrows() == 0 {
        return Err(invalid("empty Gram matrix"));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(invalid(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    Ok(())
}

/// `log ρ(𝟙 − (η/N)G)`, the GD stability exponent.
pub fn mu(gram: &DMatrix<f64>, eta: f64) -> Result<f64> {
    check_gram_for_mu(gram, eta)?;
    let n = gram.nrows();
    let gd = DMatrix::identity(n, n) - gram * (eta / n as f64);
    let rho = linalg::sym_eigenvalues(&gd)
        .iter()
        .fold(0.0_f64, |m, e| m.max(e.abs()));
    Ok(rho.ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuEquivalence {
    pub mu: f64,
    pub mu_negative: bool,
    /// `‖G/N‖ < 2/η`, the edge-of-stability form of the same condition.
    pub hessian_norm_lt_2_over_eta: bool,
    pub hessian_norm: f64,
    /// Distance of the spectrum of `G/N` to the boundary points `{0, 2/η}`.
    pub boundary_distance: f64,
}

impl MuEquivalence {
    pub fn agree(&self) -> bool {
        self.mu_negative == self.hessian_norm_lt_2_over_eta
    }
}

pub fn mu_stability_equivalence(gram: &DMatrix<f64>, eta: f64) -> Result<MuEquivalence> {
    let mu_value = mu(gram, eta)?;
    let n = gram.nrows() as f64;
    let ev: Vec<f64> = linalg::sym_eigenvalues(gram)
        .iter()
        .map(|e| e / n)
        .collect();
    let hessian_norm = ev.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    let edge = 2.0 / eta;
    let boundary_distance = ev
        .iter()
        .map(|e| e.abs().min((e - edge).abs()))
        .fold(f64::INFINITY, f64::min);
    Ok(MuEquivalence {
        mu: mu_value,
        mu_negative: mu_value < 0.0,
        hessian_norm_lt_2_over_eta: hessian_norm < edge,
        hessian_norm,
        boundary_distance,
    })
}

fn check_budget(count: usize, n: usize, budget: u64) -> Result<()> {
    let required = (count as f64).powi(n as i32);
    if required > budget as f64 {
        return Err(Error::BudgetExceeded { required, budget });
    }
    Ok(())
}

/// Largest `n` whose full enumeration fits the budget.
pub fn max_enumerable_steps(count: usize, budget: u64) -> usize {
    if count <= 1 {
        return usize::MAX;
    }
    let mut n = 0;
    let mut total = 1u128;
    while total * count as u128 <= budget as u128 {
        total *= count as u128;
        n += 1;
    }
    n
}

/// Mean of `log ‖M_{i_n} ⋯ M_{i_1} · P‖` over all continuations, where `P` is
/// represented as `prod · exp(log_scale)`.
fn enum_norm_mean(
    factors: &FactorSet,
    remaining: usize,
    prod: &DMatrix<f64>,
    log_scale: f64,
    bufs: &mut [DMatrix<f64>],
) -> f64 {
    let (buf, rest) = bufs.split_first_mut().expect("one buffer per level");
    let mut children = Vec::with_capacity(factors.len());
    for m in factors.factors() {
        buf.gemm(1.0, m, prod, 0.0);
        let s = buf.amax();
        if s == 0.0 {
            children.push(f64::NEG_INFINITY);
            continue;
        }
        if remaining == 1 {
            children.push(log_scale + linalg::op_norm(buf).ln());
        } else {
            *buf /= s;
            children.push(enum_norm_mean(
                factors,
                remaining - 1,
                buf,
                log_scale + s.ln(),
                rest,
            ));
        }
    }
    linalg::pairwise_sum(&children) / children.len() as f64
}

/// `(1/n)·E log ‖Ψ⁽ⁿ⁾‖` by enumeration of all `Kⁿ` index sequences.
pub fn lambda_exact(factors: &FactorSet, n: usize) -> Result<f64> {
    lambda_exact_with_budget(factors, n, ENUMERATION_BUDGET)
}

pub fn lambda_exact_with_budget(factors: &FactorSet, n: usize, budget: u64) -> Result<f64> {
    if n == 0 {
        return Err(invalid("number of steps must be at least 1"));
    }
    check_budget(factors.len(), n, budget)?;
    let dim = factors.dim();
    let first: Vec<f64> = factors
        .factors()
        .par_iter()
        .map(|m| {
            if n == 1 {
                let nrm = linalg::op_norm(m);
                return if nrm == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    nrm.ln()
                };
            }
            let s = m.amax();
            if s == 0.0 {
                return f64::NEG_INFINITY;
            }
            let mut bufs = vec![DMatrix::zeros(dim, dim); n - 1];
            enum_norm_mean(factors, n - 1, &(m / s), s.ln(), &mut bufs)
        })
        .collect();
    Ok(linalg::pairwise_sum(&first) / first.len() as f64 / n as f64)
}

fn per_trial_logs(
    factors: &FactorSet,
    n: usize,
    trials: usize,
    seed: u64,
    method: Method,
) -> Result<Vec<f64>> {
    let dim = factors.dim();
    (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let stream = SeedStream::for_trial(seed, t);
            match method {
                Method::McNorm => Ok(product_log_norm(factors, &stream, n)),
                Method::McVector => {
                    let w = linalg::random_unit_vector(&mut stream.aux_rng(), dim);
                    let w = DMatrix::from_column_slice(dim, 1, &w);
                    Ok(sample_product(factors, &stream, n, &w)?.log_norm())
                }
                Method::ExactEnum => unreachable!(),
            }
        })
        .collect()
}

/// Monte Carlo estimate of λ from `trials` independent length-`n` products.
pub fn lambda_mc(
    factors: &FactorSet,
    n: usize,
    trials: usize,
    seed: u64,
    method: Method,
) -> Result<LyapunovEstimate> {
    if n == 0 {
        return Err(invalid("number of steps must be at least 1"));
    }
    if trials < 2 {
        return Err(invalid("at least two trials are required"));
    }
    if method == Method::ExactEnum {
        return Err(invalid("lambda_mc takes mc-norm or mc-vector"));
    }
    let logs = per_trial_logs(factors, n, trials, seed, method)?;
    let annihilated = logs.iter().filter(|x| **x == f64::NEG_INFINITY).count();
    let (value, std_error) = if annihilated > 0 {
        (f64::NEG_INFINITY, 0.0)
    } else {
        let rates: Vec<f64> = logs.iter().map(|l| l / n as f64).collect();
        linalg::mean_and_std_error(&rates)
    };
    Ok(LyapunovEstimate {
        value,
        std_error,
        n_steps: n,
        trials,
        method,
        seed: Some(seed),
        annihilated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    #[serde(with = "ext_real::vec")]
    pub exponents: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub n_steps: usize,
    pub trials: usize,
    pub seed: u64,
}

impl SpectrumEstimate {
    pub fn sum(&self) -> f64 {
        self.exponents.iter().sum()
    }
}

/// Oseledets exponents from averaged QR stretch rates of a full random frame.
pub fn oseledets_spectrum(
    factors: &FactorSet,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<SpectrumEstimate> {
    if n == 0 || trials == 0 {
        return Err(invalid("steps and trials must be positive"));
    }
    let dim = factors.dim();
    let rows: Vec<Vec<f64>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let stream = SeedStream::for_trial(seed, t);
            let frame = linalg::random_frame(&mut stream.aux_rng(), dim, dim);
            let prod = sample_product(factors, &stream, n, &frame)?;
            Ok(prod.log_stretch.iter().map(|l| l / n as f64).collect())
        })
        .collect::<Result<_>>()?;
    let mut slots: Vec<(f64, f64)> = (0..dim)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            linalg::mean_and_std_error(&col)
        })
        .collect();
    slots.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(SpectrumEstimate {
        exponents: slots.iter().map(|s| s.0).collect(),
        std_errors: slots.iter().map(|s| s.1).collect(),
        n_steps: n,
        trials,
        seed,
    })
}

/// Mean of `log |det M_i|` over the factors, the per-step volume growth.
pub fn mean_log_det(factors: &FactorSet) -> f64 {
    let logs: Vec<f64> = factors
        .factors()
        .iter()
        .map(|m| m.clone().determinant().abs().ln())
        .collect();
    linalg::pairwise_sum(&logs) / logs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentMode {
    ExactEnum,
    Mc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub p: f64,
    #[serde(with = "ext_real")]
    pub value: f64,
    pub std_error: f64,
    pub n_steps: usize,
    pub trials: usize,
    pub mode: MomentMode,
    /// Probe direction attaining the maximum.
    pub direction: Vec<f64>,
}

/// Coordinate axes, the top right-singular vector of the GD factor and a few
/// random unit vectors. The sup over the sphere is approximated on this set.
pub fn probe_directions(factors: &FactorSet, seed: u64) -> Vec<Vec<f64>> {
    let dim = factors.dim();
    let mut probes: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            e
        })
        .collect();
    let svd = factors.gd_factor().clone().svd(false, true);
    if let Some(v_t) = svd.v_t {
        let top = svd.singular_values.imax();
        let v: Vec<f64> = v_t.row(top).iter().copied().collect();
        if linalg::norm(&v) > 0.0 {
            probes.push(v);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x9E0B_E5D1_2EC7_0001));
    for _ in 0..RANDOM_PROBES {
        probes.push(linalg::random_unit_vector(&mut rng, dim));
    }
    probes
}

/// `log Σ ‖M_{i_n} ⋯ M_{i_1} v‖^p` over continuations, `v = vec · exp(log_scale)`.
fn enum_moment_lse(
    factors: &FactorSet,
    p: f64,
    remaining: usize,
    v: &[f64],
    log_scale: f64,
    bufs: &mut [Vec<f64>],
) -> f64 {
    let (buf, rest) = bufs.split_first_mut().expect("one buffer per level");
    let mut children = Vec::with_capacity(factors.len());
    for m in factors.factors() {
        linalg::mat_vec(m, v, buf);
        let nrm = linalg::norm(buf);
        if nrm == 0.0 {
            children.push(p * f64::NEG_INFINITY);
            continue;
        }
        let ls = log_scale + nrm.ln();
        if remaining == 1 {
            children.push(p * ls);
        } else {
            buf.iter_mut().for_each(|x| *x /= nrm);
            children.push(enum_moment_lse(factors, p, remaining - 1, buf, ls, rest));
        }
    }
    linalg::log_sum_exp(&children)
}

fn moment_exact_direction(factors: &FactorSet, p: f64, n: usize, w: &[f64]) -> f64 {
    let dim = factors.dim();
    let mut bufs = vec![vec![0.0; dim]; n];
    let lse = enum_moment_lse(factors, p, n, w, 0.0, &mut bufs);
    (lse - n as f64 * (factors.len() as f64).ln()) / n as f64
}

fn moment_mc_direction(
    factors: &FactorSet,
    p: f64,
    n: usize,
    trials: usize,
    seed: u64,
    w: &[f64],
) -> Result<(f64, f64)> {
    let dim = factors.dim();
    let wm = DMatrix::from_column_slice(dim, 1, w);
    let logs: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let stream = SeedStream::for_trial(seed, t);
            Ok(p * sample_product(factors, &stream, n, &wm)?.log_norm())
        })
        .collect::<Result<_>>()?;
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok((max, 0.0));
    }
    let scaled: Vec<f64> = logs.iter().map(|x| (x - max).exp()).collect();
    let (mean, se) = linalg::mean_and_std_error(&scaled);
    // delta method: se(log X̄) ≈ se(X̄)/X̄
    Ok(((max + mean.ln()) / n as f64, se / mean / n as f64))
}

/// `(1/n)·log E ‖Ψ⁽ⁿ⁾w‖^p`, maximized over [`probe_directions`].
pub fn moment_lyapunov(
    factors: &FactorSet,
    p: f64,
    n: usize,
    mode: MomentMode,
    trials: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    if n == 0 {
        return Err(invalid("number of steps must be at least 1"));
    }
    if !p.is_finite() {
        return Err(invalid("moment order must be finite"));
    }
    if mode == MomentMode::ExactEnum {
        check_budget(factors.len(), n, ENUMERATION_BUDGET)?;
    } else if trials < 2 {
        return Err(invalid("at least two trials are required"));
    }
    let trials = if mode == MomentMode::ExactEnum {
        1
    } else {
        trials
    };
    let probes = probe_directions(factors, seed);
    if p == 0.0 {
        return Ok(MomentEstimate {
            p,
            value: 0.0,
            std_error: 0.0,
            n_steps: n,
            trials,
            mode,
            direction: probes[0].clone(),
        });
    }
    let mut best: Option<(f64, f64, usize)> = None;
    for (k, w) in probes.iter().enumerate() {
        let (value, se) = match mode {
            MomentMode::ExactEnum => (moment_exact_direction(factors, p, n, w), 0.0),
            MomentMode::Mc => moment_mc_direction(factors, p, n, trials, seed, w)?,
        };
        if best.is_none_or(|(b, _, _)| value > b) {
            best = Some((value, se, k));
        }
    }
    let (value, std_error, k) = best.expect("probe set is nonempty");
    Ok(MomentEstimate {
        p,
        value,
        std_error,
        n_steps: n,
        trials,
        mode,
        direction: probes[k].clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentClass {
    Stable,
    Unstable,
    Marginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondMomentVerdict {
    pub verdict: MomentClass,
    pub lambda2: MomentEstimate,
    pub lambda: LyapunovEstimate,
    /// `Some(true)` when λ is negative beyond its error band, `None` when undecided.
    pub almost_surely_stable: Option<bool>,
    /// The λ < 0 < Λ₂ regime.
    pub as_stable_but_second_moment_unstable: bool,
}

fn band(std_error: f64) -> f64 {
    (3.0 * std_error).max(VERDICT_FLOOR)
}

/// Sign of Λ₂ with the sign of λ alongside. Λ₂ is enumerated exactly when the
/// budget allows and sampled otherwise.
pub fn second_moment_verdict(
    factors: &FactorSet,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<SecondMomentVerdict> {
    let mode = if check_budget(factors.len(), n, ENUMERATION_BUDGET).is_ok() {
        MomentMode::ExactEnum
    } else {
        MomentMode::Mc
    };
    let lambda2 = moment_lyapunov(factors, 2.0, n, mode, trials, seed)?;
    let lambda = lambda_mc(factors, n, trials.max(2), seed, Method::McNorm)?;
    let tol = band(lambda2.std_error);
    let verdict = if lambda2.value > tol {
        MomentClass::Unstable
    } else if lambda2.value < -tol {
        MomentClass::Stable
    } else {
        MomentClass::Marginal
    };
    let lam_tol = band(lambda.std_error);
    let almost_surely_stable = if lambda.value < -lam_tol {
        Some(true)
    } else if lambda.value > lam_tol {
        Some(false)
    } else {
        None
    };
    Ok(SecondMomentVerdict {
        verdict,
        as_stable_but_second_moment_unstable: almost_surely_stable == Some(true)
            && verdict == MomentClass::Unstable,
        lambda2,
        lambda,
        almost_surely_stable,
    })
}

/// Top Lyapunov exponent of a deterministic linear map, `log ρ(A)`, via the
/// eigenvalues of `A`. Used to cross-check the GD singleton cocycle.
pub fn log_spectral_radius(a: &DMatrix<f64>) -> f64 {
    let ev = a.complex_eigenvalues();
    ev.iter().map(|z| z.norm()).fold(0.0, f64::max).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    fn scalar_pair() -> FactorSet {
        FactorSet::from_matrices(vec![m(1, &[1.0 / 3.0]), m(1, &[2.0])]).unwrap()
    }

    #[test]
    fn mu_examples() {
        assert!((mu(&m(1, &[1.0]), 0.5).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(mu(&m(1, &[1.0]), 2.0).unwrap(), 0.0);
        let v = mu(&m(2, &[1.0, 0.0, 0.0, 3.0]), 0.9).unwrap();
        assert!((v - 0.55f64.ln()).abs() < 1e-14);
        assert!(mu(&m(2, &[1.0, 2.0, 0.0, 1.0]), 0.5).is_err());
    }

    #[test]
    fn equivalence_at_boundary() {
        let e = mu_stability_equivalence(&m(1, &[1.0]), 2.0).unwrap();
        assert!(!e.mu_negative && !e.hessian_norm_lt_2_over_eta);
        let e = mu_stability_equivalence(&m(2, &[1.0, 0.0, 0.0, 3.0]), 0.9).unwrap();
        assert!(e.mu_negative && e.hessian_norm_lt_2_over_eta);
    }

    #[test]
    fn exact_scalar_and_single_step() {
        let f = FactorSet::from_gram(&m(1, &[3.0]), 0.25).unwrap();
        for n in 1..6 {
            assert!((lambda_exact(&f, n).unwrap() - 0.25f64.ln()).abs() < 1e-14);
        }
        let g = m(2, &[2.0, 1.0, 1.0, 2.0]);
        let f = FactorSet::from_gram(&g, 0.9).unwrap();
        let direct = f
            .factors()
            .iter()
            .map(|x| linalg::op_norm(x).ln())
            .sum::<f64>()
            / 2.0;
        assert!((lambda_exact(&f, 1).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn exact_matches_explicit_enumeration() {
        let g = m(2, &[2.0, 1.0, 1.0, 2.0]);
        let f = FactorSet::from_gram(&g, 0.9).unwrap();
        let n = 5;
        let mut total = 0.0;
        for code in 0..32usize {
            let idx: Vec<usize> = (0..n).map(|b| (code >> b) & 1).collect();
            total += linalg::op_norm(&crate::cocycle::explicit_product(&f, &idx)).ln();
        }
        let expected = total / 32.0 / n as f64;
        assert!((lambda_exact(&f, n).unwrap() - expected).abs() < 1e-13);
    }

    #[test]
    fn budget_is_enforced() {
        let g = m(2, &[2.0, 1.0, 1.0, 2.0]);
        let f = FactorSet::from_gram(&g, 0.9).unwrap();
        assert!(matches!(
            lambda_exact(&f, 24),
            Err(Error::BudgetExceeded { .. })
        ));
        assert_eq!(max_enumerable_steps(2, ENUMERATION_BUDGET), 23);
    }

    #[test]
    fn singular_factor_gives_negative_infinity() {
        let f = FactorSet::from_gram(&m(1, &[1.0]), 1.0).unwrap();
        assert_eq!(lambda_exact(&f, 3).unwrap(), f64::NEG_INFINITY);
        let est = lambda_mc(&f, 10, 4, 0, Method::McVector).unwrap();
        assert_eq!(est.value, f64::NEG_INFINITY);
        assert_eq!(est.annihilated, 4);
    }

    #[test]
    fn mc_is_deterministic() {
        let g = m(2, &[2.0, 1.0, 1.0, 2.0]);
        let f = FactorSet::from_gram(&g, 0.9).unwrap();
        let a = lambda_mc(&f, 32, 64, 5, Method::McVector).unwrap();
        let b = lambda_mc(&f, 32, 64, 5, Method::McVector).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn moment_of_scalar_pair() {
        let f = scalar_pair();
        let l2 = moment_lyapunov(&f, 2.0, 6, MomentMode::ExactEnum, 0, 1).unwrap();
        assert!((l2.value - (37.0f64 / 18.0).ln()).abs() < 1e-12);
        let l0 = moment_lyapunov(&f, 0.0, 6, MomentMode::Mc, 16, 1).unwrap();
        assert_eq!(l0.value, 0.0);
    }

    #[test]
    fn estimate_row_serializes_infinity() {
        let mut est = LyapunovEstimate::exact(f64::NEG_INFINITY, 3);
        est.seed = Some(2);
        let json = serde_json::to_string(&est.row("lambda")).unwrap();
        assert!(json.contains("\"-inf\""), "{json}");
        let back: EstimateRow = serde_json::from_str(&json).unwrap();
        assert_eq!(back.value, f64::NEG_INFINITY);
    }
}
