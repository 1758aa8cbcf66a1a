#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use resobs::csdecode::{rip_constant_bruteforce, RIP_THRESHOLD};
use resobs::model::{build_horizon_operators, is_observable, DiscreteLinearSystem, HorizonOperators};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vec(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(n, n, rng).qr().q()
}

/// Observable system with an orthogonal state matrix, so every block of the
/// stacked observability map has comparable size.
pub fn random_system(n: usize, m: usize, l: usize, rng: &mut ChaCha8Rng) -> DiscreteLinearSystem {
    loop {
        let a = random_orthogonal(n, rng);
        let b = gaussian(n, l, rng);
        let c = gaussian(m, n, rng);
        let d = gaussian(m, l, rng) * 0.5;
        let sys = DiscreteLinearSystem::new(a, b, c, d, 0.1).unwrap();
        if is_observable(&sys) {
            return sys;
        }
    }
}

/// Stacked outputs and inputs of a noise-free window started at `x0`.
pub fn simulate_window(
    sys: &DiscreteLinearSystem,
    x0: &DVector<f64>,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> (DVector<f64>, DVector<f64>) {
    let (m, l) = (sys.m(), sys.l());
    let mut y = DVector::zeros(m * window);
    let mut u_all = DVector::zeros(l * window);
    let mut x = x0.clone();
    for k in 0..window {
        let u = gaussian_vec(l, rng);
        y.rows_mut(k * m, m).copy_from(&sys.output(&x, &u));
        u_all.rows_mut(k * l, l).copy_from(&u);
        x = sys.step(&x, &u);
    }
    (y, u_all)
}

/// `s`-sparse vector with entries of magnitude in `[0.5, 2]` and random sign.
pub fn sparse_vector(len: usize, s: usize, rng: &mut ChaCha8Rng) -> (DVector<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..s {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    let mut support = idx[..s].to_vec();
    support.sort_unstable();
    let mut e = DVector::zeros(len);
    for &i in &support {
        let mag: f64 = rng.random_range(0.5..2.0);
        e[i] = if rng.random::<bool>() { mag } else { -mag };
    }
    (e, support)
}

pub struct Certified {
    pub sys: DiscreteLinearSystem,
    pub ops: HorizonOperators,
    pub delta_2s: f64,
}

/// Draw systems until the annihilator of the window has a brute-force
/// `delta_2s` below the recovery threshold. Returns the instance and the
/// number of rejected draws.
pub fn certified_instance(s: usize, rng: &mut ChaCha8Rng) -> (Certified, usize) {
    let mut rejected = 0;
    loop {
        let n = rng.random_range(1..=2);
        let m = rng.random_range(3..=4);
        let window = rng.random_range(n + 2..=n + 3);
        let sys = random_system(n, m, 1, rng);
        let ops = build_horizon_operators(&sys, window).unwrap();
        let delta = rip_constant_bruteforce(ops.annihilator().unwrap(), 2 * s).unwrap();
        if delta < RIP_THRESHOLD {
            return (
                Certified {
                    sys,
                    ops,
                    delta_2s: delta,
                },
                rejected,
            );
        }
        rejected += 1;
    }
}
