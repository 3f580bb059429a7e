use nalgebra::DMatrix;
use proptest::prelude::*;

use sgd_stability::cocycle::{
    explicit_product, product_log_norm, sample_product, FactorSet, SeedStream,
};
use sgd_stability::linalg;
use sgd_stability::lyapunov::{self, Method, MomentMode};
use sgd_stability::projective::{SphereGrid, TransferOperator};
use sgd_stability::regularity;

fn spd(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim * dim).prop_map(move |v| {
        let a = DMatrix::from_vec(dim, dim, v);
        let g = a.transpose() * &a + DMatrix::identity(dim, dim) * 0.2;
        (&g + g.transpose()) * 0.5
    })
}

fn instance() -> impl Strategy<Value = (DMatrix<f64>, f64)> {
    (2usize..=3)
        .prop_flat_map(spd)
        .prop_flat_map(|g| {
            let scale = g.nrows() as f64 / g.trace();
            (Just(g), (0.2f64..2.5).prop_map(move |u| u * scale))
        })
        .prop_filter("nonsingular factors", |(g, eta)| {
            FactorSet::from_gram(g, *eta)
                .map(|f| f.is_nonsingular() && f.k1() > 1e-6)
                .unwrap_or(false)
        })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cocycle_law_splits_products((g, eta) in instance(), seed in any::<u64>(), n in 1usize..20, m in 1usize..20) {
        let f = FactorSet::from_gram(&g, eta).unwrap();
        let stream = SeedStream::new(seed);
        let whole = explicit_product(&f, &stream.indices(n + m, f.len()));
        let first = explicit_product(&f, &stream.indices(n, f.len()));
        let second = explicit_product(&f, &stream.shift(n as u64).indices(m, f.len()));
        let err = (&whole - second * first).amax();
        prop_assert!(err <= 1e-9 * (1.0 + whole.amax()), "err {err}");
    }

    #[test]
    fn tracked_norm_matches_explicit_product((g, eta) in instance(), seed in any::<u64>(), n in 1usize..40) {
        let f = FactorSet::from_gram(&g, eta).unwrap();
        let stream = SeedStream::new(seed);
        let explicit = linalg::op_norm(&explicit_product(&f, &stream.indices(n, f.len()))).ln();
        prop_assert!(close(product_log_norm(&f, &stream, n), explicit, 1e-9));
        let frame = DMatrix::identity(f.dim(), f.dim());
        let framed = sample_product(&f, &stream, n, &frame).unwrap().log_norm();
        prop_assert!(close(framed, explicit, 1e-9));
    }

    #[test]
    fn growth_is_bracketed_by_k1_k2((g, eta) in instance(), seed in any::<u64>(), n in 1usize..30) {
        let f = FactorSet::from_gram(&g, eta).unwrap();
        let stream = SeedStream::new(seed);
        let frame = DMatrix::from_fn(f.dim(), 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let v = sample_product(&f, &stream, n, &frame).unwrap().log_norm();
        let nf = n as f64;
        prop_assert!(v >= nf * f.k1().ln() - 1e-9 && v <= nf * f.k2().ln() + 1e-9);
    }

    #[test]
    fn scaling_factors_shifts_exponents((g, eta) in instance(), c in 0.1f64..10.0, seed in any::<u64>()) {
        let f = FactorSet::from_gram(&g, eta).unwrap();
        let fc = f.scaled(c);
        let a = lyapunov::lambda_mc(&f, 32, 16, seed, Method::McNorm).unwrap();
        let b = lyapunov::lambda_mc(&fc, 32, 16, seed, Method::McNorm).unwrap();
        prop_assert!((b.value - a.value - c.ln()).abs() <= 1e-8);
        let sa = lyapunov::oseledets_spectrum(&f, 32, 8, seed).unwrap();
        let sb = lyapunov::oseledets_spectrum(&fc, 32, 8, seed).unwrap();
        for (x, y) in sa.exponents.iter().zip(&sb.exponents) {
            prop_assert!((y - x - c.ln()).abs() <= 1e-8);
        }
    }

    #[test]
    fn exact_enumeration_bounds_sampling((g, eta) in instance(), seed in any::<u64>(), n in 1usize..7) {
        let f = FactorSet::from_gram(&g, eta).unwrap();
        let exact = lyapunov::lambda_exact(&f, n).unwrap();
        let mc = lyapunov::lambda_mc(&f, n, 256, seed, Method::McVector).unwrap();
        prop_assert!(mc.value <= exact + 3.0 * mc.std_error + 1e-12);
    }

    #[test]
    fn multiples_never_increase_exact_lambda((g, eta) in instance(), n in 1usize..5) {
        let f = FactorSet::from_gram(&g, eta).unwrap();
        let a = lyapunov::lambda_exact(&f, n).unwrap();
        let b = lyapunov::lambda_exact(&f, 2 * n).unwrap();
        prop_assert!(b <= a + 1e-10);
    }

    #[test]
    fn gd_singleton_lambda_is_mu((g, eta) in instance(), n in 1usize..64) {
        // the GD factor is symmetric, so ‖Aⁿ‖ = ρ(A)ⁿ for every n
        let gd = FactorSet::from_gram(&g, eta).unwrap().gd_singleton();
        let mu = lyapunov::mu(&g, eta).unwrap();
        let mc = lyapunov::lambda_mc(&gd, n, 2, 1, Method::McNorm).unwrap();
        prop_assert!(close(mc.value, mu, 1e-10), "mc {} mu {mu}", mc.value);
        prop_assert!(close(lyapunov::lambda_exact(&gd, n.min(8)).unwrap(), mu, 1e-10));
    }

    #[test]
    fn moment_exponent_is_convex((g, eta) in instance()) {
        let f = FactorSet::from_gram(&g, eta).unwrap();
        let at = |p: f64| lyapunov::moment_lyapunov(&f, p, 6, MomentMode::ExactEnum, 0, 3).unwrap().value;
        let (l0, l1, l2) = (at(0.5), at(1.0), at(1.5));
        prop_assert!(l1 <= 0.5 * (l0 + l2) + 1e-9);
    }

    #[test]
    fn regularity_ignores_relabelling((g, eta) in instance(), swap in 0usize..3) {
        let n = g.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(swap % n, (swap + 1) % n);
        let pg = DMatrix::from_fn(n, n, |i, j| g[(perm[i], perm[j])]);
        let a = regularity::check_regular(&g, eta).unwrap();
        let b = regularity::check_regular(&pg, eta).unwrap();
        prop_assert_eq!(a.regular, b.regular);
        prop_assert_eq!(a.components.len(), b.components.len());
    }

    #[test]
    fn transfer_operator_preserves_positivity((g, eta) in instance().prop_filter("planar", |(g, _)| g.nrows() == 2), q in -2.0f64..2.0) {
        let f = FactorSet::from_gram(&g, eta).unwrap();
        let grid = SphereGrid::circle(256).unwrap();
        let op = TransferOperator::new(&grid, &f).unwrap();
        let ones = vec![1.0; grid.nodes().len()];
        prop_assert!(op.apply(q, &ones).iter().all(|&v| v > 0.0));
        let (r0, _) = op.leading_eigen(0.0, 1e-12).unwrap();
        prop_assert!((r0 - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn stream_shift_composes(seed in any::<u64>(), a in 0u64..1000, b in 0u64..1000, t in 0u64..1000, count in 1usize..9) {
        let s = SeedStream::new(seed);
        prop_assert_eq!(s.shift(a).shift(b).index(t, count), s.index(a + b + t, count));
        prop_assert!(s.index(t, count) < count);
    }
}
