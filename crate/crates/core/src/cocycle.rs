//! Linearized step factors `𝟙 − ηG_[i]` and the seeded matrix cocycle
//! `Ψ⁽ⁿ⁾ = M_{ξₙ} ⋯ M_{ξ₁}` built from them.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, mix64, rows};

/// Upper bound on the number of steps between QR renormalizations.
pub const RENORM_INTERVAL: usize = 16;

/// Maximal stretch ratio `(K₂/K₁)ʳ` tolerated between renormalizations.
const MAX_STRETCH_BETWEEN_QR: f64 = 1e4;

/// `|R_jj| / max|R_ii|` below this after a renormalization means the frame collapsed.
const COLLAPSE_RATIO: f64 = 1e-13;

/// The finite family of matrices driving the cocycle, drawn uniformly at each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSet {
    eta: Option<f64>,
    #[serde(with = "rows::list")]
    factors: Vec<DMatrix<f64>>,
    #[serde(with = "rows")]
    gd_factor: DMatrix<f64>,
    #[serde(skip)]
    gram: Option<DMatrix<f64>>,
    k1: f64,
    k2: f64,
    renorm_interval: usize,
}

fn masked_gram(gram: &DMatrix<f64>, rows_kept: &[usize]) -> DMatrix<f64> {
    let n = gram.nrows();
    let mut masked = DMatrix::zeros(n, n);
    for &i in rows_kept {
        masked.row_mut(i).copy_from(&gram.row(i));
    }
    masked
}

fn check_gram(gram: &DMatrix<f64>, eta: f64) -> Result<()> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(invalid(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    if gram.nrows() == 0 {
        return Err(invalid("empty Gram matrix"));
    }
    linalg::ensure_symmetric(gram)
}

/// `𝟙_N − (η/B)·G_[batch]` where `G_[batch]` keeps only the rows in `batch` (0-based).
pub fn minibatch_factor(gram: &DMatrix<f64>, eta: f64, batch: &[usize]) -> Result<DMatrix<f64>> {
    check_gram(gram, eta)?;
    let n = gram.nrows();
    if batch.is_empty() {
        return Err(invalid("mini-batch must be nonempty"));
    }
    let mut sorted = batch.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != batch.len() || sorted.iter().any(|&i| i >= n) {
        return Err(invalid(format!(
            "batch must hold distinct indices below {n}"
        )));
    }
    let b = batch.len() as f64;
    Ok(DMatrix::identity(n, n) - masked_gram(gram, &sorted) * (eta / b))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

impl FactorSet {
    /// SGD factors `𝟙 − ηG_[i]` and GD factor `𝟙 − (η/N)G` for a Gram matrix.
    pub fn from_gram(gram: &DMatrix<f64>, eta: f64) -> Result<Self> {
        check_gram(gram, eta)?;
        let n = gram.nrows();
        let factors = (0..n)
            .map(|i| DMatrix::identity(n, n) - masked_gram(gram, &[i]) * eta)
            .collect();
        let gd = DMatrix::identity(n, n) - gram * (eta / n as f64);
        let mut set = Self::assemble(factors, gd);
        set.eta = Some(eta);
        set.gram = Some(gram.clone());
        Ok(set)
    }

    /// Mini-batch SGD: one factor per size-`batch_size` subset, all equiprobable.
    pub fn minibatch(gram: &DMatrix<f64>, eta: f64, batch_size: usize) -> Result<Self> {
        check_gram(gram, eta)?;
        let n = gram.nrows();
        if batch_size == 0 || batch_size > n {
            return Err(invalid(format!("batch size must lie in 1..={n}")));
        }
        let factors = combinations(n, batch_size)
            .iter()
            .map(|b| minibatch_factor(gram, eta, b))
            .collect::<Result<Vec<_>>>()?;
        let gd = DMatrix::identity(n, n) - gram * (eta / n as f64);
        let mut set = Self::assemble(factors, gd);
        set.eta = Some(eta);
        set.gram = Some(gram.clone());
        Ok(set)
    }

    /// An arbitrary equiprobable family of square matrices of equal size. The GD
    /// analogue is taken to be the mean factor.
    pub fn from_matrices(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = factors
            .first()
            .ok_or_else(|| invalid("factor set must be nonempty"))?;
        let n = first.nrows();
        if n == 0 || factors.iter().any(|m| m.nrows() != n || m.ncols() != n) {
            return Err(invalid(
                "factors must be nonempty square matrices of equal size",
            ));
        }
        let mut mean = DMatrix::zeros(n, n);
        for m in &factors {
            mean += m;
        }
        mean /= factors.len() as f64;
        Ok(Self::assemble(factors, mean))
    }

    fn assemble(factors: Vec<DMatrix<f64>>, gd_factor: DMatrix<f64>) -> Self {
        let mut k1 = f64::INFINITY;
        let mut k2 = 0.0_f64;
        for m in &factors {
            let sv = linalg::singular_values(m);
            k2 = k2.max(sv[0]);
            k1 = k1.min(*sv.last().unwrap());
        }
        if k1 <= f64::EPSILON * k2 {
            k1 = 0.0;
        }
        let renorm_interval = if k1 > 0.0 && k2 > k1 {
            let per_step = (k2 / k1).ln();
            ((MAX_STRETCH_BETWEEN_QR.ln() / per_step).floor() as usize).clamp(1, RENORM_INTERVAL)
        } else if k1 > 0.0 {
            RENORM_INTERVAL
        } else {
            1
        };
        FactorSet {
            eta: None,
            factors,
            gd_factor,
            gram: None,
            k1,
            k2,
            renorm_interval,
        }
    }

    /// The deterministic GD cocycle as a one-element factor set.
    pub fn gd_singleton(&self) -> Self {
        let mut set = Self::assemble(vec![self.gd_factor.clone()], self.gd_factor.clone());
        set.eta = self.eta;
        set
    }

    /// Every factor multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let factors = self.factors.iter().map(|m| m * c).collect();
        let mut set = Self::assemble(factors, &self.gd_factor * c);
        set.eta = self.eta;
        set
    }

    pub fn dim(&self) -> usize {
        self.gd_factor.nrows()
    }

    /// Number of equiprobable factors.
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn factor(&self, i: usize) -> &DMatrix<f64> {
        &self.factors[i]
    }

    pub fn gd_factor(&self) -> &DMatrix<f64> {
        &self.gd_factor
    }

    pub fn eta(&self) -> Option<f64> {
        self.eta
    }

    pub fn gram(&self) -> Option<&DMatrix<f64>> {
        self.gram.as_ref()
    }

    /// `min_i ‖M_i⁻¹‖⁻¹`, or 0 when some factor is singular.
    pub fn k1(&self) -> f64 {
        self.k1
    }

    /// `max_i ‖M_i‖`.
    pub fn k2(&self) -> f64 {
        self.k2
    }

    pub fn renorm_interval(&self) -> usize {
        self.renorm_interval
    }

    pub fn is_nonsingular(&self) -> bool {
        self.k1 > 0.0
    }
}

pub fn make_factors(gram: &DMatrix<f64>, eta: f64) -> Result<FactorSet> {
    FactorSet::from_gram(gram, eta)
}

/// Counter-based index stream `ω = (ξ₁, ξ₂, …)` with an O(1) shift `θ`.
///
/// Step `t` (0-based, so `t = 0` is `ξ₁`) is keyed by `(master_seed, shift_offset + t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream {
    pub master_seed: u64,
    pub shift_offset: u64,
}

impl SeedStream {
    pub fn new(master_seed: u64) -> Self {
        SeedStream {
            master_seed,
            shift_offset: 0,
        }
    }

    /// Independent stream for trial `trial` of an experiment seeded with `master_seed`.
    pub fn for_trial(master_seed: u64, trial: u64) -> Self {
        SeedStream::new(mix64(
            mix64(master_seed) ^ trial.wrapping_mul(0xD1B5_4A32_D192_ED03),
        ))
    }

    /// `θᵏ`: the stream starting `k` steps later.
    pub fn shift(self, k: u64) -> Self {
        SeedStream {
            shift_offset: self.shift_offset + k,
            ..self
        }
    }

    /// Index drawn at 0-based step `t`, uniform over `0..count`.
    pub fn index(&self, t: u64, count: usize) -> usize {
        let h = mix64(self.master_seed ^ mix64(self.shift_offset.wrapping_add(t)));
        // multiply-high reduction; bias is at most count / 2^64
        ((h as u128 * count as u128) >> 64) as usize
    }

    pub fn indices(&self, n: usize, count: usize) -> Vec<usize> {
        (0..n as u64).map(|t| self.index(t, count)).collect()
    }

    /// Auxiliary generator for non-index randomness attached to this stream
    /// (initial points, probe vectors). Independent of `shift_offset`.
    pub fn aux_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix64(self.master_seed ^ 0x5EED_1417_A0C0_FFEE))
    }
}

/// Result of pushing an orthonormal frame through `n` steps of the cocycle.
///
/// With the initial frame `W₀`, `Ψ⁽ⁿ⁾W₀ = frame · exp(log_scale) · triangular`,
/// where `triangular` is upper triangular with nonnegative diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameProduct {
    pub frame: DMatrix<f64>,
    /// Per column: accumulated `log R_jj`, the finite-time stretch of direction j.
    pub log_stretch: Vec<f64>,
    pub triangular: DMatrix<f64>,
    pub log_scale: f64,
    pub steps: usize,
}

impl FrameProduct {
    /// `log ‖Ψ⁽ⁿ⁾W₀‖` (operator norm); for a single vector `log ‖Ψ⁽ⁿ⁾w‖`.
    pub fn log_norm(&self) -> f64 {
        if self.log_stretch.len() == 1 {
            return self.log_stretch[0];
        }
        let nrm = linalg::op_norm(&self.triangular);
        if nrm == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.log_scale + nrm.ln()
        }
    }
}

/// Applies `n` cocycle steps to an orthonormal `N × k` frame with QR
/// renormalization at least every [`RENORM_INTERVAL`] steps. The raw product is
/// never formed.
pub fn sample_product(
    factors: &FactorSet,
    stream: &SeedStream,
    n: usize,
    initial_frame: &DMatrix<f64>,
) -> Result<FrameProduct> {
    let dim = factors.dim();
    let k = initial_frame.ncols();
    if initial_frame.nrows() != dim || k == 0 || k > dim {
        return Err(invalid(format!(
            "frame must be {dim} x k with 1 <= k <= {dim}"
        )));
    }
    if n == 0 {
        return Err(invalid("number of steps must be at least 1"));
    }
    if k == 1 {
        return sample_vector(factors, stream, n, initial_frame);
    }
    let count = factors.len();
    let interval = factors.renorm_interval();
    let mut q = initial_frame.clone();
    let mut buf = DMatrix::zeros(dim, k);
    let mut log_stretch = vec![0.0; k];
    let mut tri = DMatrix::<f64>::identity(k, k);
    let mut log_scale = 0.0;
    for t in 0..n {
        let m = factors.factor(stream.index(t as u64, count));
        buf.gemm(1.0, m, &q, 0.0);
        std::mem::swap(&mut q, &mut buf);
        if (t + 1) % interval == 0 || t + 1 == n {
            let qr = q.clone().qr();
            let mut qm = qr.q();
            let mut r = qr.r();
            for j in 0..k {
                if r[(j, j)] < 0.0 {
                    qm.column_mut(j).neg_mut();
                    r.row_mut(j).neg_mut();
                }
            }
            let rmax = (0..k).map(|j| r[(j, j)]).fold(0.0, f64::max);
            let rmin = (0..k).map(|j| r[(j, j)]).fold(f64::INFINITY, f64::min);
            if rmax == 0.0 || rmin <= COLLAPSE_RATIO * rmax {
                return Err(Error::FrameCollapse {
                    step: t + 1,
                    ratio: if rmax > 0.0 { rmin / rmax } else { 0.0 },
                });
            }
            for (j, ls) in log_stretch.iter_mut().enumerate() {
                *ls += r[(j, j)].ln();
            }
            tri = r * tri;
            let s = tri.amax();
            tri /= s;
            log_scale += s.ln();
            q = qm;
        }
    }
    Ok(FrameProduct {
        frame: q,
        log_stretch,
        triangular: tri,
        log_scale,
        steps: n,
    })
}

fn sample_vector(
    factors: &FactorSet,
    stream: &SeedStream,
    n: usize,
    initial: &DMatrix<f64>,
) -> Result<FrameProduct> {
    let dim = factors.dim();
    let count = factors.len();
    let mut v: Vec<f64> = initial.column(0).iter().copied().collect();
    let mut buf = vec![0.0; dim];
    let mut log_norm = 0.0;
    let start = linalg::norm(&v);
    if start == 0.0 {
        return Err(invalid("initial vector must be nonzero"));
    }
    for t in 0..n {
        linalg::mat_vec(factors.factor(stream.index(t as u64, count)), &v, &mut buf);
        std::mem::swap(&mut v, &mut buf);
        let nrm = linalg::norm(&v);
        if nrm == 0.0 {
            log_norm = f64::NEG_INFINITY;
            break;
        }
        if nrm > 1e100 || nrm < 1e-100 || (t + 1) % RENORM_INTERVAL == 0 || t + 1 == n {
            log_norm += nrm.ln();
            v.iter_mut().for_each(|x| *x /= nrm);
        }
    }
    let log_norm = log_norm + start.ln();
    let frame = DMatrix::from_column_slice(dim, 1, &v);
    let (triangular, log_scale) = if log_norm.is_finite() {
        (DMatrix::from_element(1, 1, 1.0), log_norm)
    } else {
        (DMatrix::zeros(1, 1), f64::NEG_INFINITY)
    };
    Ok(FrameProduct {
        frame,
        log_stretch: vec![log_norm],
        triangular,
        log_scale,
        steps: n,
    })
}

/// `log ‖Ψ⁽ⁿ⁾‖` by tracking a scalar-rescaled copy of the product. Works for
/// singular factors (returns `-inf` when the product vanishes).
pub fn product_log_norm(factors: &FactorSet, stream: &SeedStream, n: usize) -> f64 {
    let dim = factors.dim();
    let count = factors.len();
    let mut p = DMatrix::<f64>::identity(dim, dim);
    let mut buf = DMatrix::zeros(dim, dim);
    let mut log_scale = 0.0;
    for t in 0..n {
        let m = factors.factor(stream.index(t as u64, count));
        buf.gemm(1.0, m, &p, 0.0);
        std::mem::swap(&mut p, &mut buf);
        if (t + 1) % RENORM_INTERVAL == 0 {
            let s = p.amax();
            if s == 0.0 {
                return f64::NEG_INFINITY;
            }
            p /= s;
            log_scale += s.ln();
        }
    }
    let nrm = linalg::op_norm(&p);
    if nrm == 0.0 {
        f64::NEG_INFINITY
    } else {
        log_scale + nrm.ln()
    }
}

/// The explicit product `M_{ξₙ} ⋯ M_{ξ₁}` for a given index sequence.
pub fn explicit_product(factors: &FactorSet, indices: &[usize]) -> DMatrix<f64> {
    let n = factors.dim();
    indices
        .iter()
        .fold(DMatrix::identity(n, n), |acc, &i| factors.factor(i) * acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
        }
    }

    fn m(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    #[test]
    fn scalar_factors_coincide() {
        let f = FactorSet::from_gram(&m(1, &[1.0]), 0.5).unwrap();
        assert_eq!(f.factor(0)[(0, 0)], 0.5);
        assert_eq!(f.gd_factor()[(0, 0)], 0.5);
    }

    #[test]
    fn diagonal_factors_mask_rows() {
        let f = FactorSet::from_gram(&m(2, &[1.0, 0.0, 0.0, 3.0]), 0.9).unwrap();
        assert!((f.factor(0).clone() - m(2, &[0.1, 0.0, 0.0, 1.0])).amax() < 1e-15);
        assert!((f.factor(1).clone() - m(2, &[1.0, 0.0, 0.0, -1.7])).amax() < 1e-15);
    }

    #[test]
    fn coupled_factor_row_one() {
        let f = FactorSet::from_gram(&m(2, &[2.0, 1.0, 1.0, 2.0]), 0.9).unwrap();
        assert!((f.factor(0).clone() - m(2, &[-0.8, -0.9, 0.0, 1.0])).amax() < 1e-15);
        let gd = f.gd_factor();
        assert_eq!(gd, &gd.transpose());
    }

    #[test]
    fn minibatch_reductions() {
        let g = m(3, &[2.0, 1.0, 0.5, 1.0, 2.0, 0.3, 0.5, 0.3, 1.5]);
        let f = FactorSet::from_gram(&g, 0.7).unwrap();
        for i in 0..3 {
            assert_eq!(&minibatch_factor(&g, 0.7, &[i]).unwrap(), f.factor(i));
        }
        let full = minibatch_factor(&g, 0.7, &[0, 1, 2]).unwrap();
        assert!((full - f.gd_factor()).amax() < 1e-15);
        assert!(minibatch_factor(&g, 0.7, &[]).is_err());

        let g2 = m(2, &[2.0, 1.0, 1.0, 2.0]);
        let both = minibatch_factor(&g2, 0.9, &[0, 1]).unwrap();
        let expected = DMatrix::identity(2, 2) - &g2 * 0.45;
        assert!((both - expected).amax() < 1e-15);
    }

    #[test]
    fn minibatch_set_sizes() {
        let g = m(3, &[2.0, 1.0, 0.5, 1.0, 2.0, 0.3, 0.5, 0.3, 1.5]);
        assert_eq!(FactorSet::minibatch(&g, 0.5, 2).unwrap().len(), 3);
        assert_eq!(FactorSet::minibatch(&g, 0.5, 3).unwrap().len(), 1);
        assert!(FactorSet::minibatch(&g, 0.5, 4).is_err());
    }

    #[test]
    fn singular_factor_gives_zero_k1() {
        let f = FactorSet::from_gram(&m(1, &[1.0]), 1.0).unwrap();
        assert_eq!(f.k1(), 0.0);
    }

    #[test]
    fn stream_is_deterministic_and_shifts() {
        let s = SeedStream::new(42);
        assert_eq!(s.indices(100, 3), s.indices(100, 3));
        let shifted = s.shift(5).shift(7);
        assert_eq!(shifted, s.shift(12));
        for t in 0..50 {
            assert_eq!(s.shift(12).index(t, 3), s.index(t + 12, 3));
        }
    }

    #[test]
    fn stream_indices_are_roughly_uniform() {
        let s = SeedStream::new(9);
        let mut counts = [0usize; 4];
        for i in s.indices(40_000, 4) {
            counts[i] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 400.0, "{counts:?}");
        }
    }

    #[test]
    fn scalar_product_log_norm() {
        let f = FactorSet::from_gram(&m(1, &[3.0]), 0.25).unwrap();
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = sample_product(&f, &SeedStream::new(1), 37, &one).unwrap();
        assert!(close(p.log_norm(), 37.0 * 0.25f64.ln(), 1e-13));
        assert!(close(
            product_log_norm(&f, &SeedStream::new(1), 37),
            37.0 * 0.25f64.ln(),
            1e-13
        ));
    }

    #[test]
    fn matches_explicit_three_step_product() {
        let f = FactorSet::from_gram(&m(2, &[2.0, 1.0, 1.0, 2.0]), 0.9).unwrap();
        let stream = SeedStream::new(77);
        let explicit = explicit_product(&f, &stream.indices(3, 2));
        let full = sample_product(&f, &stream, 3, &DMatrix::identity(2, 2)).unwrap();
        assert!(close(
            full.log_norm(),
            linalg::op_norm(&explicit).ln(),
            1e-13
        ));
        let recon = &full.frame * &full.triangular * full.log_scale.exp();
        assert!((recon - &explicit).amax() < 1e-13);
        let w = DMatrix::from_column_slice(2, 1, &[0.6, 0.8]);
        let vec = sample_product(&f, &stream, 3, &w).unwrap();
        assert!(close(vec.log_norm(), (&explicit * &w).norm().ln(), 1e-13));
    }

    #[test]
    fn cocycle_law_splits_products() {
        let g = m(3, &[2.0, 1.0, 0.5, 1.0, 2.0, 0.3, 0.5, 0.3, 1.5]);
        let f = FactorSet::from_gram(&g, 0.6).unwrap();
        let stream = SeedStream::new(5);
        let id = DMatrix::identity(3, 3);
        let (n, k) = (23, 41);
        let whole = sample_product(&f, &stream, n + k, &id).unwrap();
        let first = sample_product(&f, &stream, n, &id).unwrap();
        let second = sample_product(&f, &stream.shift(n as u64), k, &first.frame).unwrap();
        for j in 0..3 {
            let sum = first.log_stretch[j] + second.log_stretch[j];
            assert!(close(whole.log_stretch[j], sum, 1e-10), "{j}");
        }
        assert!((whole.frame.clone() - &second.frame).amax() < 1e-10);
        let composed = second.log_scale
            + first.log_scale
            + linalg::op_norm(&(&second.triangular * &first.triangular)).ln();
        assert!(close(whole.log_norm(), composed, 1e-10));
    }

    #[test]
    fn singular_factors_collapse_frames() {
        let g = m(2, &[1.0, 0.0, 0.0, 3.0]);
        let f = FactorSet::from_gram(&g, 1.0).unwrap();
        let res = sample_product(&f, &SeedStream::new(3), 20, &DMatrix::identity(2, 2));
        assert!(matches!(res, Err(Error::FrameCollapse { .. })));
    }
}
