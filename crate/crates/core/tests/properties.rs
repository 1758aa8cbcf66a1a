mod common;

use common::{gaussian, gaussian_vec, random_system, rng, simulate_window};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;
use resobs::admm::{
    basis_pursuit, constrained_l1_regression, soft_threshold, AffineProjector, RegressionWarmStart, SolverSettings,
};
use resobs::csdecode::{best_s_term, l1_decode, sat};
use resobs::model::{build_horizon_operators, DiscreteLinearSystem, HorizonOperators};
use resobs::observer::{multi_model_estimate, solve_qcbp, solve_qcbp_warm, QcbpProblem};
use resobs::prior::{chi2_cdf, chi2_quantile, AuxiliaryPrior};

fn tight() -> SolverSettings {
    SolverSettings {
        max_iter: 200_000,
        ..SolverSettings::default()
    }
}

/// Window with one attacked channel in the last sample and a diagonal prior
/// whose mean sits `shift` of the way to the edge of its confidence ellipsoid.
fn attacked_window(
    sys: &DiscreteLinearSystem,
    ops: &HorizonOperators,
    shift: f64,
    r: &mut ChaCha8Rng,
) -> (AuxiliaryPrior, DVector<f64>, DVector<f64>) {
    let m = sys.m();
    let x0 = gaussian_vec(sys.n(), r);
    let (mut y, u) = simulate_window(sys, &x0, ops.window, r);
    let y_last = y.rows(y.len() - m, m).into_owned();
    let scale = vec![0.5; m];
    let probe = AuxiliaryPrior::diagonal(y_last.clone(), &scale, 0.99).unwrap();
    let dir = gaussian_vec(m, r).normalize();
    let mu = y_last + probe.cholesky_factor() * dir * (shift * probe.radius().sqrt());
    let prior = AuxiliaryPrior::diagonal(mu, &scale, 0.99).unwrap();
    let last = y.len() - 1;
    y[last] += 3.0;
    (prior, y, u)
}

fn last_state(sys: &DiscreteLinearSystem, x0: &DVector<f64>, u: &DVector<f64>, window: usize) -> DVector<f64> {
    let l = sys.l();
    let mut x = x0.clone();
    for k in 0..window - 1 {
        x = sys.step(&x, &u.rows(k * l, l).into_owned());
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_threshold_is_a_shrinkage(v in -1e3f64..1e3, k in 0.0f64..10.0) {
        let out = soft_threshold(v, k);
        prop_assert!(out.abs() <= v.abs());
        prop_assert!(out == 0.0 || out.signum() == v.signum());
        prop_assert!((out - (v - v.clamp(-k, k))).abs() <= 1e-12 * (1.0 + v.abs()));
    }

    #[test]
    fn sat_is_a_bounded_projection(x in -1e3f64..1e3, eps in 1e-6f64..1e3) {
        let y = sat(x, eps);
        prop_assert!(y.abs() <= eps);
        prop_assert_eq!(sat(y, eps), y);
        if x.abs() <= eps {
            prop_assert_eq!(y, x);
        }
    }

    #[test]
    fn best_s_term_keeps_the_largest(values in prop::collection::vec(-10.0f64..10.0, 1..30), s in 0usize..32) {
        let e = DVector::from_vec(values);
        let kept = best_s_term(&e, s);
        let support: Vec<usize> = (0..e.len()).filter(|&i| kept[i] != 0.0).collect();
        prop_assert!(support.len() <= s);
        let min_kept = support.iter().map(|&i| e[i].abs()).fold(f64::INFINITY, f64::min);
        for i in 0..e.len() {
            if kept[i] != 0.0 {
                prop_assert_eq!(kept[i], e[i]);
            } else if support.len() == s {
                prop_assert!(e[i].abs() <= min_kept);
            }
        }
    }

    #[test]
    fn chi2_quantile_inverts_cdf(m in 1usize..40, tau in 0.01f64..0.999) {
        let q = chi2_quantile(m, tau).unwrap();
        prop_assert!(q > 0.0);
        prop_assert!((chi2_cdf(m, q) - tau).abs() < 1e-9);
    }

    #[test]
    fn chi2_cdf_is_monotone(m in 1usize..40, a in 0.0f64..80.0, b in 0.0f64..80.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(chi2_cdf(m, lo) <= chi2_cdf(m, hi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn annihilator_is_orthonormal_and_kills_phi(seed in any::<u64>(), n in 1usize..4, m in 1usize..4, extra in 1usize..4) {
        let mut r = rng(seed);
        let sys = random_system(n, m, 1, &mut r);
        let window = n + extra;
        let ops = build_horizon_operators(&sys, window).unwrap();
        if ops.stacked_len() > n {
            let f = ops.annihilator().unwrap();
            prop_assert_eq!(f.nrows(), ops.stacked_len() - n);
            prop_assert!((f * &ops.phi).amax() < 1e-10 * (1.0 + ops.phi.amax()));
            let gram = f * f.transpose();
            prop_assert!((gram - DMatrix::identity(f.nrows(), f.nrows())).amax() < 1e-10);
        }
    }

    #[test]
    fn clean_window_decodes_to_the_true_state(seed in any::<u64>(), n in 1usize..4, m in 2usize..4) {
        let mut r = rng(seed);
        let sys = random_system(n, m, 1, &mut r);
        let ops = build_horizon_operators(&sys, n + 2).unwrap();
        let x0 = gaussian_vec(n, &mut r);
        let (y, u) = simulate_window(&sys, &x0, ops.window, &mut r);
        let res = l1_decode(&y, &ops, &u, &tight()).unwrap();
        prop_assert!((res.x_hat - x0).amax() < 1e-6);
    }

    #[test]
    fn basis_pursuit_merit_settles(seed in any::<u64>(), p in 4usize..12, k in 1usize..4) {
        let mut r = rng(seed);
        let k = k.min(p - 1);
        let f_mat = gaussian(p, p, &mut r).qr().q().rows(0, k).into_owned();
        let f = gaussian_vec(k, &mut r);
        let settings = SolverSettings { record_merit: true, ..tight() };
        let out = basis_pursuit(&AffineProjector::Annihilator { f_mat: &f_mat, f: f.clone() }, p, &settings);
        if out.converged {
            prop_assert!((&f_mat * &out.value - &f).amax() < 1e-6);
        }
        let scale = out.merit.iter().cloned().fold(0.0, f64::max);
        for pair in out.merit.windows(2).skip(10) {
            prop_assert!(pair[1] <= pair[0] + 1e-12 * scale);
        }
    }

    #[test]
    fn regression_merit_settles(seed in any::<u64>(), n in 1usize..4, rows in 6usize..16) {
        let mut r = rng(seed);
        let phi = gaussian(rows, n, &mut r);
        let b = gaussian_vec(rows, &mut r);
        let settings = SolverSettings { record_merit: true, ..tight() };
        let out = constrained_l1_regression(&phi, &b, None, None, &settings).unwrap();
        let scale = out.merit.iter().cloned().fold(0.0, f64::max);
        for pair in out.merit.windows(2).skip(10) {
            prop_assert!(pair[1] <= pair[0] + 1e-12 * scale);
        }
    }

    #[test]
    fn qcbp_iterate_is_feasible(seed in any::<u64>(), n in 1usize..4, m in 2usize..4, shift in 0.0f64..0.9) {
        let mut r = rng(seed);
        let sys = random_system(n, m, 1, &mut r);
        let ops = build_horizon_operators(&sys, n + 2).unwrap();
        let (prior, y, u) = attacked_window(&sys, &ops, shift, &mut r);
        let res = solve_qcbp(&QcbpProblem { ops: &ops, y_window: &y, u_window: &u, prior: &prior }, &tight()).unwrap();
        let y_last = &ops.phi_last * &res.x_hat + &ops.h_last * &u;
        let d2 = prior.mahalanobis_sq(&y_last).unwrap();
        prop_assert!(d2 <= prior.radius() + 1e-8, "distance {} radius {}", d2, prior.radius());
    }

    #[test]
    fn warm_and_cold_starts_agree(seed in any::<u64>(), n in 1usize..4, m in 2usize..4, shift in 0.0f64..0.9) {
        let mut r = rng(seed);
        let sys = random_system(n, m, 1, &mut r);
        let ops = build_horizon_operators(&sys, n + 2).unwrap();
        let (prior, y, u) = attacked_window(&sys, &ops, shift, &mut r);
        let prob = QcbpProblem { ops: &ops, y_window: &y, u_window: &u, prior: &prior };
        let (cold, next) = solve_qcbp_warm(&prob, &tight(), None).unwrap();
        let warm = RegressionWarmStart {
            x: &next.x + gaussian_vec(n, &mut r) * 0.1,
            dual_l1: next.dual_l1.clone(),
        };
        let (hot, _) = solve_qcbp_warm(&prob, &tight(), Some(&warm)).unwrap();
        prop_assert!((&cold.x_hat - &hot.x_hat).amax() < 1e-6, "cold {} warm {}", cold.x_hat, hot.x_hat);
    }

    #[test]
    fn multi_model_recovers_clean_windows(seed in any::<u64>(), n in 1usize..4, m in 2usize..4) {
        let mut r = rng(seed);
        let sys = random_system(n, m, 1, &mut r);
        let ops = build_horizon_operators(&sys, n + 2).unwrap();
        let x0 = gaussian_vec(n, &mut r);
        let (y, u) = simulate_window(&sys, &x0, ops.window, &mut r);
        let x_last = last_state(&sys, &x0, &u, ops.window);
        let y_last = y.rows(y.len() - m, m).into_owned();
        let prior = AuxiliaryPrior::diagonal(y_last, &vec![1.0; m], 0.99).unwrap();
        let (x_hat, res) = multi_model_estimate(&y, &u, &prior, &ops, &tight()).unwrap();
        prop_assert!(res.e_hat.amax() < 1e-5);
        prop_assert!((x_hat - x_last).amax() < 1e-5);
    }
}
