use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sgd_stability::cocycle::SeedStream;
use sgd_stability::lyapunov;
use sgd_stability::simulate::{self, EscapeConfig, Monitor, Termination};
use sgd_stability::task::{self, RegressionTask};

fn coupled() -> (RegressionTask, task::MinimumPoint) {
    let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let t = RegressionTask::linear_from_gram(&g, 5, 11).unwrap();
    let min = task::find_minimum(&t, &[0.0; 5], 1e-24).unwrap();
    (t, min)
}

#[test]
fn realized_gram_matches_request() {
    let (_, min) = coupled();
    assert!((min.gram[(0, 0)] - 2.0).abs() < 1e-9 && (min.gram[(0, 1)] - 1.0).abs() < 1e-9);
    assert!(min.on_manifold());
}

#[test]
fn gd_follows_the_sign_of_mu() {
    let (t, min) = coupled();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = simulate::perturb(&mut rng, &min.x_star, 1e-3);
    for (eta, stable) in [(1.0, true), (1.4, false)] {
        let mu = lyapunov::mu(&min.gram, eta).unwrap();
        assert_eq!(mu < 0.0, stable);
        let traj =
            simulate::run_gd(&t, &x0, eta, 400, &Monitor::escape(&min.x_star, 10.0)).unwrap();
        match traj.termination {
            Termination::Converged { .. } => assert!(stable),
            Termination::Escaped { .. } => assert!(!stable),
            Termination::Horizon => panic!("eta {eta} undecided"),
        }
    }
}

#[test]
fn sgd_is_deterministic_and_round_trips() {
    let (t, min) = coupled();
    let x0: Vec<f64> = min.x_star.iter().map(|v| v + 0.01).collect();
    let stream = SeedStream::for_trial(9, 2);
    let a = simulate::run_sgd(&t, &x0, 0.7, 200, &stream, &Monitor::default()).unwrap();
    let b = simulate::run_sgd(&t, &x0, 0.7, 200, &stream, &Monitor::default()).unwrap();
    assert_eq!(a.points, b.points);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.bin");
    simulate::write_trajectory(&path, &a).unwrap();
    let back = simulate::read_trajectory(&path).unwrap();
    assert_eq!(back.points, a.points);
    assert_eq!(back.recorded_steps, a.recorded_steps);
}

#[test]
fn escape_fractions_split_at_the_stability_boundary() {
    let (t, min) = coupled();
    let cfg = EscapeConfig {
        trials: 64,
        horizon: 20_000,
        ..EscapeConfig::default()
    };
    let low = simulate::escape_experiment(&t, &min, 0.6, &cfg).unwrap();
    let high = simulate::escape_experiment(&t, &min, 1.3, &cfg).unwrap();
    assert_eq!(low.escape_count, 0);
    assert_eq!(high.stay_and_converge_count, 0);
    assert!(high.empirical_growth_rate > 0.0);
    assert_eq!(low.distance_model, high.distance_model);
}
