//! Transfer operators `P_q f(s) = (1/K) Σ_i ‖M_i s‖^q f(M_i s/‖M_i s‖)` on the
//! unit sphere (N = 2 or 3), their leading eigenpairs and the drift function
//! `F*(w) = ‖w‖^{-p} f*(w/‖w‖)`.

use std::collections::HashMap;
use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::FactorSet;
use crate::error::{invalid, CurvePoint, Error, Result};
use crate::linalg::{self, mix64};

/// Images with `‖M_i s‖` below this are treated as annihilated.
pub const SINGULAR_NORM: f64 = 1e-14;
pub const CERTIFICATION_MARGIN: f64 = 0.01;
pub const DRIFT_TOLERANCE: f64 = 1e-2;
pub const POWER_ITERATION_CAP: usize = 20_000;
pub const DEFAULT_P_GRID: [f64; 7] = [0.025, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6];
const OFF_GRID_SAMPLES: usize = 512;
const MAX_ICOSPHERE_LEVEL: usize = 7;

/// Interpolation weights of a direction against at most three grid nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub nodes: [usize; 3],
    pub weights: [f64; 3],
}

impl Stencil {
    fn eval(&self, f: &[f64]) -> f64 {
        self.weights[0] * f[self.nodes[0]]
            + self.weights[1] * f[self.nodes[1]]
            + self.weights[2] * f[self.nodes[2]]
    }
}

#[derive(Clone, Debug)]
struct Icosphere {
    /// Faces per refinement level; children of face `f` at level `l` are `4f..4f+4` at `l + 1`.
    faces: Vec<Vec<[usize; 3]>>,
    inverses: Vec<Vec<Matrix3<f64>>>,
}

#[derive(Clone, Debug)]
pub struct SphereGrid {
    dim: usize,
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
    ico: Option<Icosphere>,
}

fn icosahedron() -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ];
    let verts = raw
        .iter()
        .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
        .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (verts, faces)
}

fn face_inverse(verts: &[Vector3<f64>], f: &[usize; 3]) -> Matrix3<f64> {
    Matrix3::from_columns(&[verts[f[0]], verts[f[1]], verts[f[2]]])
        .try_inverse()
        .expect("icosphere faces are nondegenerate")
}

impl SphereGrid {
    /// `resolution` equiangular nodes on the unit circle.
    pub fn circle(resolution: usize) -> Result<Self> {
        if resolution < 3 {
            return Err(invalid("circle grid needs at least 3 nodes"));
        }
        let nodes = (0..resolution)
            .map(|k| {
                let th = TAU * k as f64 / resolution as f64;
                vec![th.cos(), th.sin()]
            })
            .collect();
        Ok(SphereGrid {
            dim: 2,
            nodes,
            weights: vec![1.0 / resolution as f64; resolution],
            ico: None,
        })
    }

    /// Icosahedron refined `level` times: `10·4^level + 2` nodes.
    pub fn icosphere(level: usize) -> Result<Self> {
        if level > MAX_ICOSPHERE_LEVEL {
            return Err(invalid(format!(
                "icosphere level above {MAX_ICOSPHERE_LEVEL}"
            )));
        }
        let (mut verts, base) = icosahedron();
        let mut faces = vec![base];
        for _ in 0..level {
            let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
            let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push((verts[a] + verts[b]).normalize());
                    verts.len() - 1
                })
            };
            let mut next = Vec::new();
            for &[a, b, c] in faces.last().unwrap() {
                let ab = midpoint(a, b, &mut verts);
                let bc = midpoint(b, c, &mut verts);
                let ca = midpoint(c, a, &mut verts);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces.push(next);
        }
        let inverses = faces
            .iter()
            .map(|level| level.iter().map(|f| face_inverse(&verts, f)).collect())
            .collect();
        let n = verts.len();
        Ok(SphereGrid {
            dim: 3,
            nodes: verts.iter().map(|v| vec![v.x, v.y, v.z]).collect(),
            weights: vec![1.0 / n as f64; n],
            ico: Some(Icosphere { faces, inverses }),
        })
    }

    /// Circle with `resolution` nodes for N = 2; for N = 3 the coarsest
    /// icosphere with at least `resolution` nodes.
    pub fn new(dim: usize, resolution: usize) -> Result<Self> {
        match dim {
            2 => Self::circle(resolution),
            3 => {
                let level = (0..=MAX_ICOSPHERE_LEVEL)
                    .find(|&l| 10 * 4usize.pow(l as u32) + 2 >= resolution)
                    .unwrap_or(MAX_ICOSPHERE_LEVEL);
                Self::icosphere(level)
            }
            other => Err(Error::UnsupportedDimension(other)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn resolution(&self) -> usize {
        self.nodes.len()
    }

    /// Interpolation stencil of a unit vector `u`: linear in angle on the
    /// circle, barycentric on the icosphere triangle containing `u`.
    pub fn stencil(&self, u: &[f64]) -> Stencil {
        match &self.ico {
            None => {
                let r = self.nodes.len();
                let pos = u[1].atan2(u[0]).rem_euclid(TAU) / TAU * r as f64;
                let k0 = (pos.floor() as usize).min(r - 1);
                let frac = (pos - k0 as f64).clamp(0.0, 1.0);
                Stencil {
                    nodes: [k0, (k0 + 1) % r, k0],
                    weights: [1.0 - frac, frac, 0.0],
                }
            }
            Some(ico) => {
                let p = Vector3::new(u[0], u[1], u[2]);
                let score = |level: usize, f: usize| {
                    let x = ico.inverses[level][f] * p;
                    (x.min(), x)
                };
                let (mut face, mut bary) = (0..20)
                    .map(|f| (f, score(0, f)))
                    .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
                    .map(|(f, (_, x))| (f, x))
                    .unwrap();
                for level in 1..ico.faces.len() {
                    let (f, (_, x)) = (4 * face..4 * face + 4)
                        .map(|f| (f, score(level, f)))
                        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
                        .unwrap();
                    face = f;
                    bary = x;
                }
                let clamped = bary.map(|x| x.max(0.0));
                let s = clamped.sum();
                let tri = ico.faces.last().unwrap()[face];
                Stencil {
                    nodes: tri,
                    weights: [clamped[0] / s, clamped[1] / s, clamped[2] / s],
                }
            }
        }
    }

    /// Interpolated value of grid samples `f` at the direction of `w` (any nonzero vector).
    pub fn interpolate(&self, f: &[f64], w: &[f64]) -> f64 {
        let n = linalg::norm(w);
        let u: Vec<f64> = w.iter().map(|x| x / n).collect();
        self.stencil(&u).eval(f)
    }
}

/// The factor maps on the grid, precomputed once: for every node and factor
/// the log stretch `log ‖M_i s‖` and the interpolation stencil of the image direction.
#[derive(Clone, Debug)]
pub struct TransferOperator {
    count: usize,
    log_norms: Vec<f64>,
    stencils: Vec<Stencil>,
}

impl TransferOperator {
    pub fn new(grid: &SphereGrid, factors: &FactorSet) -> Result<Self> {
        if factors.dim() != grid.dim() {
            return Err(invalid(format!(
                "factor dimension {} does not match grid dimension {}",
                factors.dim(),
                grid.dim()
            )));
        }
        let count = factors.len();
        let dim = grid.dim();
        let entries: Vec<(f64, Stencil)> = (0..grid.resolution() * count)
            .into_par_iter()
            .map(|idx| {
                let (node, i) = (idx / count, idx % count);
                let mut img = vec![0.0; dim];
                linalg::mat_vec(factors.factor(i), &grid.nodes[node], &mut img);
                let nrm = linalg::norm(&img);
                if nrm < SINGULAR_NORM {
                    return Err(Error::SingularFactor { factor: i, node });
                }
                img.iter_mut().for_each(|x| *x /= nrm);
                Ok((nrm.ln(), grid.stencil(&img)))
            })
            .collect::<Result<_>>()?;
        let (log_norms, stencils) = entries.into_iter().unzip();
        Ok(TransferOperator {
            count,
            log_norms,
            stencils,
        })
    }

    fn coefficients(&self, q: f64) -> Vec<f64> {
        let k = self.count as f64;
        self.log_norms.iter().map(|l| (q * l).exp() / k).collect()
    }

    fn apply_coefficients(&self, coef: &[f64], f: &[f64], out: &mut [f64]) {
        let count = self.count;
        out.par_iter_mut().enumerate().for_each(|(node, o)| {
            let base = node * count;
            let mut acc = 0.0;
            for j in base..base + count {
                acc += coef[j] * self.stencils[j].eval(f);
            }
            *o = acc;
        });
    }

    pub fn apply(&self, q: f64, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        self.apply_coefficients(&self.coefficients(q), f, &mut out);
        out
    }

    /// Power iteration normalized to `max f = 1`, stopped when the
    /// Collatz–Wielandt bracket `[min Pf/f, max Pf/f]` is narrower than `tol·r`.
    pub fn leading_eigen(&self, q: f64, tol: f64) -> Result<(f64, Vec<f64>)> {
        if !(tol > 0.0) {
            return Err(invalid("tolerance must be positive"));
        }
        let n = self.log_norms.len() / self.count;
        let coef = self.coefficients(q);
        let mut f = vec![1.0; n];
        let mut g = vec![0.0; n];
        let mut last = (0.0, f64::INFINITY);
        for it in 1..=POWER_ITERATION_CAP {
            self.apply_coefficients(&coef, &f, &mut g);
            let (lo, hi) = f
                .iter()
                .zip(&g)
                .fold((f64::INFINITY, 0.0_f64), |(lo, hi), (a, b)| {
                    (lo.min(b / a), hi.max(b / a))
                });
            let gmax = g.iter().copied().fold(0.0, f64::max);
            if !(gmax > 0.0) || !gmax.is_finite() {
                return Err(Error::NoConvergence {
                    iterations: it,
                    r: gmax,
                    oscillation: f64::INFINITY,
                });
            }
            g.iter_mut().for_each(|x| *x /= gmax);
            std::mem::swap(&mut f, &mut g);
            last = (0.5 * (lo + hi), hi - lo);
            if hi - lo <= tol * hi {
                return Ok((last.0, f));
            }
        }
        Err(Error::NoConvergence {
            iterations: POWER_ITERATION_CAP,
            r: last.0,
            oscillation: last.1,
        })
    }
}

/// `P_q f` on the grid nodes.
pub fn apply_pq(grid: &SphereGrid, factors: &FactorSet, q: f64, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != grid.resolution() {
        return Err(invalid("samples do not match the grid"));
    }
    Ok(TransferOperator::new(grid, factors)?.apply(q, f))
}

/// Dominant eigenvalue `r(q)` and eigenfunction `f_q` (max 1).
pub fn leading_eigen(
    grid: &SphereGrid,
    factors: &FactorSet,
    q: f64,
    tol: f64,
) -> Result<(f64, Vec<f64>)> {
    TransferOperator::new(grid, factors)?.leading_eigen(q, tol)
}

/// `(q, r(q))` pairs.
pub fn r_curve(
    grid: &SphereGrid,
    factors: &FactorSet,
    qs: &[f64],
    tol: f64,
) -> Result<Vec<CurvePoint>> {
    let op = TransferOperator::new(grid, factors)?;
    qs.iter()
        .map(|&q| Ok((q, op.leading_eigen(q, tol)?.0)))
        .collect()
}

/// Central difference `(log r(ε) − log r(−ε)) / 2ε`, which approximates λ.
pub fn log_r_slope(grid: &SphereGrid, factors: &FactorSet, eps: f64, tol: f64) -> Result<f64> {
    let op = TransferOperator::new(grid, factors)?;
    let up = op.leading_eigen(eps, tol)?.0;
    let down = op.leading_eigen(-eps, tol)?.0;
    Ok((up.ln() - down.ln()) / (2.0 * eps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftCertificate {
    pub p: f64,
    /// `r(−p)`, the expected contraction factor of `F*` per step.
    pub gamma: f64,
    pub dim: usize,
    pub resolution: usize,
    pub f_star: Vec<f64>,
    pub c_minus: f64,
    pub c_plus: f64,
    /// Largest `|E F*(M w) / (γ F*(w)) − 1|` over grid nodes.
    pub node_drift_error: f64,
    /// Same over random off-grid vectors of varying length.
    pub off_grid_drift_error: f64,
    pub max_relative_drift_error: f64,
    /// Scanned `(p, r(−p))` pairs up to and including the certified one.
    pub curve: Vec<CurvePoint>,
}

impl DriftCertificate {
    /// `F*(w) = ‖w‖^{-p} f*(w/‖w‖)`.
    pub fn f_star_at(&self, grid: &SphereGrid, w: &[f64]) -> f64 {
        linalg::norm(w).powf(-self.p) * grid.interpolate(&self.f_star, w)
    }
}

fn expected_drift(
    grid: &SphereGrid,
    factors: &FactorSet,
    cert: &DriftCertificate,
    w: &[f64],
) -> f64 {
    let mut img = vec![0.0; w.len()];
    let terms: Vec<f64> = factors
        .factors()
        .iter()
        .map(|m| {
            linalg::mat_vec(m, w, &mut img);
            cert.f_star_at(grid, &img)
        })
        .collect();
    linalg::pairwise_sum(&terms) / terms.len() as f64
}

/// Scans `p_grid` ascending and certifies the first `p` with
/// `r(−p) < 1 − margin` whose drift identity `E F*(M w) = γ F*(w)` holds to
/// [`DRIFT_TOLERANCE`] on grid nodes and on random off-grid vectors.
pub fn build_drift_certificate(
    grid: &SphereGrid,
    factors: &FactorSet,
    p_grid: &[f64],
) -> Result<DriftCertificate> {
    let mut ps: Vec<f64> = p_grid.to_vec();
    if ps.is_empty() || ps.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
        return Err(invalid("p grid must be nonempty with positive entries"));
    }
    ps.sort_by(f64::total_cmp);
    let op = TransferOperator::new(grid, factors)?;
    let mut curve = Vec::new();
    let mut best_error = f64::INFINITY;
    for &p in &ps {
        let (gamma, f_star) = op.leading_eigen(-p, 1e-12)?;
        curve.push((p, gamma));
        if gamma >= 1.0 - CERTIFICATION_MARGIN {
            continue;
        }
        let c_minus = f_star.iter().copied().fold(f64::INFINITY, f64::min);
        let c_plus = f_star.iter().copied().fold(0.0, f64::max);
        let mut cert = DriftCertificate {
            p,
            gamma,
            dim: grid.dim(),
            resolution: grid.resolution(),
            f_star,
            c_minus,
            c_plus,
            node_drift_error: 0.0,
            off_grid_drift_error: 0.0,
            max_relative_drift_error: 0.0,
            curve: curve.clone(),
        };
        let applied = op.apply(-p, &cert.f_star);
        cert.node_drift_error = applied
            .iter()
            .zip(&cert.f_star)
            .map(|(a, f)| (a / (gamma * f) - 1.0).abs())
            .fold(0.0, f64::max);
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(p.to_bits()));
        let dim = grid.dim();
        cert.off_grid_drift_error = (0..OFF_GRID_SAMPLES)
            .map(|_| {
                let scale = rng.random_range(-3.0..3.0f64).exp();
                let w: Vec<f64> = linalg::random_unit_vector(&mut rng, dim)
                    .iter()
                    .map(|x| x * scale)
                    .collect();
                let lhs = expected_drift(grid, factors, &cert, &w);
                (lhs / (gamma * cert.f_star_at(grid, &w)) - 1.0).abs()
            })
            .fold(0.0, f64::max);
        cert.max_relative_drift_error = cert.node_drift_error.max(cert.off_grid_drift_error);
        if c_minus > 0.0 && cert.max_relative_drift_error < DRIFT_TOLERANCE {
            return Ok(cert);
        }
        best_error = best_error.min(cert.max_relative_drift_error);
    }
    let reason = if best_error.is_finite() {
        format!(
            "r(-p) < {} reached but drift error stayed at {best_error:.3e}",
            1.0 - CERTIFICATION_MARGIN
        )
    } else {
        format!(
            "r(-p) >= {} for every scanned p; expected when lambda <= 0",
            1.0 - CERTIFICATION_MARGIN
        )
    };
    Err(Error::NoCertificate { reason, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn m(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    #[test]
    fn grids_have_unit_nodes() {
        for g in [
            SphereGrid::circle(64).unwrap(),
            SphereGrid::icosphere(3).unwrap(),
        ] {
            for s in g.nodes() {
                assert!((linalg::norm(s) - 1.0).abs() < 1e-14);
            }
        }
        assert_eq!(SphereGrid::icosphere(2).unwrap().resolution(), 162);
        assert_eq!(SphereGrid::new(3, 600).unwrap().resolution(), 642);
        assert!(matches!(
            SphereGrid::new(4, 10),
            Err(Error::UnsupportedDimension(4))
        ));
    }

    #[test]
    fn stencils_reproduce_nodes_and_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for g in [
            SphereGrid::circle(100).unwrap(),
            SphereGrid::icosphere(3).unwrap(),
        ] {
            for (k, s) in g.nodes().iter().enumerate() {
                let st = g.stencil(s);
                let hit: f64 = (0..3)
                    .filter(|&j| st.nodes[j] == k)
                    .map(|j| st.weights[j])
                    .sum();
                assert!((hit - 1.0).abs() < 1e-9, "node {k}: {st:?}");
            }
            for _ in 0..500 {
                let u = linalg::random_unit_vector(&mut rng, g.dim());
                let st = g.stencil(&u);
                assert!(st.weights.iter().all(|w| *w >= 0.0));
                assert!((st.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                // interpolating the coordinate functions lands near u
                for c in 0..g.dim() {
                    let f: Vec<f64> = g.nodes().iter().map(|s| s[c]).collect();
                    assert!((st.eval(&f) - u[c]).abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn p0_is_markov() {
        let f = FactorSet::from_gram(&m(2, &[2.0, 1.0, 1.0, 2.0]), 0.9).unwrap();
        let grid = SphereGrid::circle(256).unwrap();
        let out = apply_pq(&grid, &f, 0.0, &vec![1.0; 256]).unwrap();
        assert!(out.iter().all(|x| (x - 1.0).abs() < 1e-14));
        let (r, f0) = leading_eigen(&grid, &f, 0.0, 1e-12).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!(f0.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn singular_factor_is_rejected() {
        let f = FactorSet::from_gram(&m(2, &[1.0, 0.0, 0.0, 3.0]), 1.0).unwrap();
        let grid = SphereGrid::circle(64).unwrap();
        assert!(matches!(
            TransferOperator::new(&grid, &f),
            Err(Error::SingularFactor { .. })
        ));
    }

    #[test]
    fn homogeneity_of_f_star() {
        let f = FactorSet::from_gram(&m(2, &[2.0, 1.0, 1.0, 2.0]), 1.3).unwrap();
        let grid = SphereGrid::circle(512).unwrap();
        let cert = build_drift_certificate(&grid, &f, &DEFAULT_P_GRID).unwrap();
        let w = [0.3, -1.1];
        let c = 3.7;
        let scaled = cert.f_star_at(&grid, &[c * w[0], c * w[1]]);
        assert!((scaled - c.powf(-cert.p) * cert.f_star_at(&grid, &w)).abs() < 1e-12 * scaled);
    }

    #[test]
    fn diagonal_dominant_instance_certifies() {
        let f = FactorSet::from_gram(&m(2, &[1.0, 0.2, 0.2, 3.0]), 0.9).unwrap();
        let grid = SphereGrid::circle(2048).unwrap();
        let cert = build_drift_certificate(&grid, &f, &DEFAULT_P_GRID).unwrap();
        assert!(cert.gamma < 0.99 && cert.c_minus > 0.0);
        assert!(cert.node_drift_error < 1e-3, "{}", cert.node_drift_error);
        assert!(
            cert.max_relative_drift_error < 1e-2,
            "{}",
            cert.max_relative_drift_error
        );
    }

    #[test]
    fn three_dimensional_operator() {
        let g = m(3, &[2.0, 0.5, 0.3, 0.5, 2.0, 0.4, 0.3, 0.4, 2.0]);
        let f = FactorSet::from_gram(&g, 1.3).unwrap();
        let grid = SphereGrid::icosphere(3).unwrap();
        let (r0, _) = leading_eigen(&grid, &f, 0.0, 1e-12).unwrap();
        assert!((r0 - 1.0).abs() < 1e-9);
        let (r, fq) = leading_eigen(&grid, &f, -0.1, 1e-10).unwrap();
        assert!(r.is_finite() && fq.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn contracting_factors_have_no_certificate() {
        let f = FactorSet::from_gram(&m(2, &[2.0, 1.0, 1.0, 2.0]), 0.3).unwrap();
        let grid = SphereGrid::circle(256).unwrap();
        assert!(matches!(
            build_drift_certificate(&grid, &f, &DEFAULT_P_GRID),
            Err(Error::NoCertificate { .. })
        ));
    }
}
