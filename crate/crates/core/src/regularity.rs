//! Regularity of a minimum and numerical witnesses for the contraction and
//! strong-irreducibility properties of the semigroup generated by the factors.

use nalgebra::DMatrix;
use petgraph::unionfind::UnionFind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cocycle::FactorSet;
use crate::error::{invalid, Result};
use crate::linalg::{self, mix64, rows};

/// Relative zero tolerance for Gram entries.
pub const ZERO_TOLERANCE: f64 = 1e-10;
pub const WITNESS_MAX_ITERATIONS: usize = 1000;
pub const RANK_GAP_TOLERANCE: f64 = 1e-8;
/// Subspaces closer than this principal angle count as the same.
pub const SUBSPACE_SEPARATION: f64 = 1e-6;

const MIN_WORD_LENGTH: usize = 8;
const MAX_WORD_LENGTH: usize = 24;
const RANDOM_STARTS: usize = 4;
const MAX_COORDINATE_STARTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalMargin {
    pub index: usize,
    pub g_ii: f64,
    /// `|G_ii − 1/η|`
    pub to_inverse_eta: f64,
    /// `|G_ii − 2/η|`
    pub to_twice_inverse_eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub eta: f64,
    pub tolerance: f64,
    pub diag_ok: bool,
    pub diagonal_margins: Vec<DiagonalMargin>,
    pub connectivity_ok: bool,
    /// Connected components of the graph `G_ij ≠ 0`, as sorted 0-based index lists.
    pub components: Vec<Vec<usize>>,
    /// Smallest `|G_ij|` accepted as an edge, if any edge exists.
    pub margin: Option<f64>,
    pub regular: bool,
}

pub fn check_regular(gram: &DMatrix<f64>, eta: f64) -> Result<RegularityReport> {
    check_regular_with_tolerance(gram, eta, ZERO_TOLERANCE * gram.amax())
}

/// Same as [`check_regular`] with an absolute zero tolerance.
pub fn check_regular_with_tolerance(
    gram: &DMatrix<f64>,
    eta: f64,
    tolerance: f64,
) -> Result<RegularityReport> {
    linalg::ensure_symmetric(gram)?;
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(invalid(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    let n = gram.nrows();
    let diagonal_margins: Vec<DiagonalMargin> = (0..n)
        .map(|i| {
            let g = gram[(i, i)];
            DiagonalMargin {
                index: i,
                g_ii: g,
                to_inverse_eta: (g - 1.0 / eta).abs(),
                to_twice_inverse_eta: (g - 2.0 / eta).abs(),
            }
        })
        .collect();
    let diag_ok = diagonal_margins
        .iter()
        .all(|m| m.to_inverse_eta > tolerance && m.to_twice_inverse_eta > tolerance);

    let mut uf = UnionFind::<usize>::new(n);
    let mut margin: Option<f64> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = gram[(i, j)].abs();
            if a > tolerance {
                uf.union(i, j);
                margin = Some(margin.map_or(a, |m| m.min(a)));
            }
        }
    }
    let labels = uf.into_labeling();
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    for i in 0..n {
        match seen.iter().position(|&l| l == labels[i]) {
            Some(k) => components[k].push(i),
            None => {
                seen.push(labels[i]);
                components.push(vec![i]);
            }
        }
    }
    let connectivity_ok = components.len() == 1;
    Ok(RegularityReport {
        eta,
        tolerance,
        diag_ok,
        diagonal_margins,
        connectivity_ok,
        components,
        margin,
        regular: diag_ok && connectivity_ok,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionWitness {
    /// 0-based index of the expanding factor.
    pub index: usize,
    #[serde(with = "rows")]
    pub limit: DMatrix<f64>,
    /// `σ₂/σ₁` of the normalized power (0 for scalars).
    pub rank_gap: f64,
    pub iterations: usize,
    /// Whether `rank_gap` dropped below the rank-one tolerance.
    pub rank_one: bool,
}

fn rank_gap(m: &DMatrix<f64>) -> f64 {
    let sv = linalg::singular_values(m);
    if sv.len() < 2 || sv[0] == 0.0 {
        0.0
    } else {
        sv[1] / sv[0]
    }
}

/// Whether factor `i` has a simple dominant eigenvalue of modulus above 1.
fn expanding_score(factors: &FactorSet, i: usize) -> Option<f64> {
    if let (Some(g), Some(eta)) = (factors.gram(), factors.eta()) {
        if factors.len() == g.nrows() {
            let s = (1.0 - eta * g[(i, i)]).abs();
            return (s > 1.0).then_some(s);
        }
    }
    let mut moduli: Vec<f64> = factors
        .factor(i)
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    let top = moduli[0];
    let simple = moduli.get(1).is_none_or(|&s| top > s * (1.0 + 1e-9));
    (top > 1.0 && simple).then_some(top)
}

/// Normalized powers of the most expanding factor, converging to a rank-one
/// matrix when that factor has a dominant eigenvalue beyond 1. `None` means no
/// factor qualifies, which is inconclusive.
pub fn contraction_witness(factors: &FactorSet) -> Option<ContractionWitness> {
    let (index, _) = (0..factors.len())
        .filter_map(|i| expanding_score(factors, i).map(|s| (i, s)))
        .fold(None, |best: Option<(usize, f64)>, (i, s)| match best {
            Some((_, b)) if b >= s => best,
            _ => Some((i, s)),
        })?;
    let m = factors.factor(index);
    let mut p = m / linalg::op_norm(m);
    let mut gap = rank_gap(&p);
    let mut iterations = 1;
    while gap >= RANK_GAP_TOLERANCE && iterations < WITNESS_MAX_ITERATIONS {
        p = m * &p;
        p /= linalg::op_norm(&p);
        gap = rank_gap(&p);
        iterations += 1;
    }
    Some(ContractionWitness {
        index,
        limit: p,
        rank_gap: gap,
        iterations,
        rank_one: gap < RANK_GAP_TOLERANCE,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartCount {
    pub start: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionProbe {
    pub k: usize,
    pub counts: Vec<StartCount>,
    pub min_count: usize,
    pub saturated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IrreducibilityEvidence {
    StronglyIrreducible,
    NotStronglyIrreducible,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrreducibilityReport {
    /// Always "heuristic": exact infinitude of orbits is not decidable numerically.
    pub label: String,
    pub trials: usize,
    pub saturation_threshold: usize,
    pub dims: Vec<DimensionProbe>,
    pub evidence: IrreducibilityEvidence,
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn coordinate_subsets(n: usize, k: usize, limit: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        if out.len() == limit {
            return out;
        }
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < n - k + i {
                cur[i] += 1;
                for j in i + 1..k {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn orthonormalize(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let k = m.ncols();
    let qr = m.clone().qr();
    let r = qr.r();
    let rmax = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let rmin = (0..k)
        .map(|j| r[(j, j)].abs())
        .fold(f64::INFINITY, f64::min);
    (rmax > 0.0 && rmin > 1e-12 * rmax).then(|| qr.q().columns(0, k).into_owned())
}

/// Sine of the largest principal angle between two subspaces given by orthonormal bases.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let residual = b - a * (a.transpose() * b);
    linalg::op_norm(&residual)
}

fn orbit_count<R: Rng>(
    factors: &FactorSet,
    start: &DMatrix<f64>,
    trials: usize,
    rng: &mut R,
) -> usize {
    let mut images: Vec<DMatrix<f64>> = Vec::new();
    'trial: for _ in 0..trials {
        let len = rng.random_range(MIN_WORD_LENGTH..=MAX_WORD_LENGTH);
        let mut frame = start.clone();
        for _ in 0..len {
            let i = rng.random_range(0..factors.len());
            match orthonormalize(&(factors.factor(i) * &frame)) {
                Some(q) => frame = q,
                None => continue 'trial,
            }
        }
        if images
            .iter()
            .all(|v| subspace_distance(v, &frame) > SUBSPACE_SEPARATION)
        {
            images.push(frame);
        }
    }
    images.len()
}

/// Counts numerically distinct images of coordinate and random subspaces under
/// random words of the semigroup, per proper dimension `k`. A count staying
/// small for some start suggests a finite invariant family of subspaces.
pub fn irreducibility_probe(
    factors: &FactorSet,
    trials: usize,
    seed: u64,
) -> Result<IrreducibilityReport> {
    let n = factors.dim();
    if n < 2 {
        return Err(invalid("irreducibility probe needs dimension at least 2"));
    }
    if trials == 0 {
        return Err(invalid("trials must be positive"));
    }
    let threshold = trials.div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x001E_ED0F_1AB5));
    let mut dims = Vec::new();
    let mut any_small = false;
    for k in 1..n {
        let mut counts = Vec::new();
        for subset in coordinate_subsets(n, k, MAX_COORDINATE_STARTS) {
            let mut start = DMatrix::zeros(n, k);
            for (c, &i) in subset.iter().enumerate() {
                start[(i, c)] = 1.0;
            }
            let count = orbit_count(factors, &start, trials, &mut rng);
            counts.push(StartCount {
                start: format!("axes {subset:?}"),
                count,
            });
        }
        for r in 0..RANDOM_STARTS {
            let start = linalg::random_frame(&mut rng, n, k);
            let count = orbit_count(factors, &start, trials, &mut rng);
            counts.push(StartCount {
                start: format!("random {r}"),
                count,
            });
        }
        let min_count = counts.iter().map(|c| c.count).min().unwrap_or(0);
        any_small |= min_count <= binomial(n, k);
        dims.push(DimensionProbe {
            k,
            saturated: min_count >= threshold,
            min_count,
            counts,
        });
    }
    let evidence = if dims.iter().all(|d| d.saturated) {
        IrreducibilityEvidence::StronglyIrreducible
    } else if any_small {
        IrreducibilityEvidence::NotStronglyIrreducible
    } else {
        IrreducibilityEvidence::Inconclusive
    };
    Ok(IrreducibilityReport {
        label: "heuristic".into(),
        trials,
        saturation_threshold: threshold,
        dims,
        evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    #[test]
    fn regularity_examples() {
        let diag = check_regular(&m(2, &[1.0, 0.0, 0.0, 3.0]), 0.9).unwrap();
        assert!(!diag.connectivity_ok);
        assert_eq!(diag.components, vec![vec![0], vec![1]]);
        let coupled = check_regular(&m(2, &[2.0, 1.0, 1.0, 2.0]), 0.9).unwrap();
        assert!(coupled.regular);
        assert_eq!(coupled.margin, Some(1.0));
        let boundary = check_regular(&m(1, &[1.0]), 1.0).unwrap();
        assert!(!boundary.diag_ok);
        assert_eq!(boundary.diagonal_margins[0].to_inverse_eta, 0.0);
    }

    #[test]
    fn three_blocks() {
        let g = m(
            4,
            &[
                1.0, 0.0, 0.2, 0.0, 0.0, 1.0, 0.0, 0.0, 0.2, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        );
        let r = check_regular(&g, 0.3).unwrap();
        assert_eq!(r.components, vec![vec![0, 2], vec![1], vec![3]]);
    }

    #[test]
    fn witness_examples() {
        let w = contraction_witness(&FactorSet::from_gram(&m(1, &[3.0]), 1.0).unwrap()).unwrap();
        assert_eq!(w.limit[(0, 0)].abs(), 1.0);
        assert_eq!(w.rank_gap, 0.0);

        let w =
            contraction_witness(&FactorSet::from_gram(&m(2, &[1.0, 0.0, 0.0, 3.0]), 0.9).unwrap())
                .unwrap();
        assert_eq!(w.index, 1);
        assert!(w.rank_one && w.iterations <= 60, "{w:?}");
        assert!((w.limit[(1, 1)].abs() - 1.0).abs() < 1e-8);
        assert!(w.limit[(0, 0)].abs() < 1e-8);

        assert!(contraction_witness(&FactorSet::from_gram(&m(1, &[1.0]), 0.5).unwrap()).is_none());
    }

    #[test]
    fn generic_factor_sets_use_eigenvalues() {
        let f = FactorSet::from_matrices(vec![
            m(2, &[2.0, 1.0, 0.0, 0.5]),
            m(2, &[0.5, 0.0, 0.0, 0.5]),
        ])
        .unwrap();
        let w = contraction_witness(&f).unwrap();
        assert_eq!(w.index, 0);
        assert!(w.rank_one);
    }

    #[test]
    fn probe_distinguishes_diagonal_and_coupled() {
        let diag = FactorSet::from_gram(&m(2, &[1.0, 0.0, 0.0, 3.0]), 0.9).unwrap();
        let r = irreducibility_probe(&diag, 128, 1).unwrap();
        assert!(r.dims[0]
            .counts
            .iter()
            .filter(|c| c.start.starts_with("axes"))
            .all(|c| c.count <= 2));
        assert_eq!(r.evidence, IrreducibilityEvidence::NotStronglyIrreducible);

        let coupled = FactorSet::from_gram(&m(2, &[2.0, 1.0, 1.0, 2.0]), 0.9).unwrap();
        let r = irreducibility_probe(&coupled, 128, 1).unwrap();
        assert_eq!(
            r.evidence,
            IrreducibilityEvidence::StronglyIrreducible,
            "{r:?}"
        );

        let one = FactorSet::from_gram(&m(1, &[1.0]), 0.5).unwrap();
        assert!(irreducibility_probe(&one, 16, 0).is_err());
    }

    #[test]
    fn coordinate_subsets_enumerate_combinations() {
        assert_eq!(
            coordinate_subsets(3, 2, 10),
            vec![vec![0, 1], vec![0, 2], vec![1, 2]]
        );
        assert_eq!(binomial(4, 2), 6);
    }
}
