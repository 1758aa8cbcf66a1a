//! State observers: the prior-constrained moving-horizon observer, the plain
//! l1 moving-horizon observer and a Luenberger baseline.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

pub use crate::admm::SolverSettings;
use crate::admm::{self, BallConstraint, RegressionWarmStart};
use crate::csdecode::{self, best_s_term, polish_candidates, recovery_constant, DecodeResult};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{propagate_estimate, DiscreteLinearSystem, HorizonOperators};
use crate::prior::AuxiliaryPrior;

/// Absolute slack on the squared Mahalanobis radius accepted as feasible.
pub const FEASIBILITY_SLACK: f64 = 1e-9;

/// `min_x ||y - H u - Phi x||_1` subject to
/// `||Phi_T x + H_T u - mu||^2_{Sigma^-1} <= chi2_m(tau)`.
#[derive(Debug, Clone, Copy)]
pub struct QcbpProblem<'a> {
    pub ops: &'a HorizonOperators,
    pub y_window: &'a DVector<f64>,
    /// All `T` inputs of the window, oldest first.
    pub u_window: &'a DVector<f64>,
    pub prior: &'a AuxiliaryPrior,
}

struct Ellipsoid {
    /// `L^{-1} Phi_T`.
    w_mat: DMatrix<f64>,
    /// `L^{-1} (mu - H_T u)`.
    center: DVector<f64>,
    radius_sq: f64,
}

impl Ellipsoid {
    fn dist_sq(&self, x: &DVector<f64>) -> f64 {
        (&self.w_mat * x - &self.center).norm_squared()
    }

    fn tol(&self) -> f64 {
        FEASIBILITY_SLACK * self.radius_sq.max(1.0)
    }

    fn contains(&self, x: &DVector<f64>) -> bool {
        self.dist_sq(x) <= self.radius_sq + self.tol()
    }
}

/// Solve the prior-constrained decoding problem from a cold start.
pub fn solve_qcbp(prob: &QcbpProblem<'_>, settings: &SolverSettings) -> Result<DecodeResult> {
    solve_qcbp_warm(prob, settings, None).map(|(r, _)| r)
}

/// As [`solve_qcbp`], optionally seeded with a previous window's iterates.
pub fn solve_qcbp_warm(
    prob: &QcbpProblem<'_>,
    settings: &SolverSettings,
    warm: Option<&RegressionWarmStart>,
) -> Result<(DecodeResult, RegressionWarmStart)> {
    settings.validate()?;
    let ops = prob.ops;
    if prob.prior.dim() != ops.m {
        return Err(Error::DimensionMismatch(format!(
            "prior has {} channels, system has {}",
            prob.prior.dim(),
            ops.m
        )));
    }
    let b = ops.input_free(prob.y_window, prob.u_window)?;
    let ell = if prob.prior.radius().is_finite() {
        let offset = &ops.h_last * prob.u_window;
        let e = Ellipsoid {
            w_mat: prob.prior.whiten_matrix(&ops.phi_last),
            center: prob.prior.whiten(&(prob.prior.mu() - offset)),
            radius_sq: prob.prior.radius(),
        };
        Some(e)
    } else {
        None
    };

    // Point of the affine image closest to the prior mean.
    let x_center = match &ell {
        Some(e) => {
            let xc = linalg::lstsq(&e.w_mat, &e.center);
            let d2 = e.dist_sq(&xc);
            if d2 > e.radius_sq + e.tol() {
                return Err(Error::InfeasiblePrior(format!(
                    "closest reachable output lies at squared Mahalanobis distance {d2:.6e}, radius is {:.6e}",
                    e.radius_sq
                )));
            }
            Some(xc)
        }
        None => None,
    };

    let center_scale = ell.as_ref().map_or(0.0, |e| e.center.amax());
    let scale = b.amax().max(center_scale).max(f64::MIN_POSITIVE);
    let bs = &b / scale;
    let ball = ell.as_ref().map(|e| {
        let wn = e.w_mat.norm();
        let gamma = if wn > 0.0 { ops.phi.norm() / wn } else { 1.0 };
        BallConstraint {
            w_mat: &e.w_mat * gamma,
            center: &e.center * (gamma / scale),
            radius: gamma * e.radius_sq.sqrt() / scale,
        }
    });
    let warm_scaled = warm.map(|w| RegressionWarmStart {
        x: &w.x / scale,
        dual_l1: w.dual_l1.clone(),
    });
    let out = admm::constrained_l1_regression(&ops.phi, &bs, ball.as_ref(), warm_scaled.as_ref(), settings)?;
    let (xs, dual_l1) = out.value;
    let mut x = xs * scale;

    // Pull a marginally infeasible iterate back inside along the segment to
    // the prior-centred point.
    if let (Some(e), Some(xc)) = (&ell, &x_center) {
        if !e.contains(&x) {
            let dir = &x - xc;
            let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if e.dist_sq(&(xc + &dir * mid)) <= e.radius_sq {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            x = xc + dir * lo;
        }
    }

    let objective = |x: &DVector<f64>| linalg::norm_l1(&(&b - &ops.phi * x));
    let mut obj_best = objective(&x);
    let mut polished = false;
    let slack = csdecode::objective_slack(&b);
    let residual = &b - &ops.phi * &x;
    for cand in polish_candidates(&ops.phi, &b, &residual) {
        if let Some(e) = &ell {
            if !e.contains(&cand) {
                continue;
            }
        }
        let obj = objective(&cand);
        if obj <= obj_best + slack && (!polished || obj < obj_best) {
            x = cand;
            obj_best = obj;
            polished = true;
        }
    }

    let e_hat = &b - &ops.phi * &x;
    let next_warm = RegressionWarmStart {
        x: x.clone(),
        dual_l1,
    };
    Ok((
        DecodeResult {
            objective: linalg::norm_l1(&e_hat),
            x_hat: x,
            e_hat,
            converged: out.converged,
            iterations: out.iterations,
            polished,
            merit: out.merit,
        },
        next_warm,
    ))
}

/// Squared Mahalanobis distance of the last-sample output implied by `x`.
pub fn constraint_value(prob: &QcbpProblem<'_>, x: &DVector<f64>) -> Result<f64> {
    let y_last = &prob.ops.phi_last * x + &prob.ops.h_last * prob.u_window;
    prob.prior.mahalanobis_sq(&y_last)
}

/// Decode the window's first state under the prior, then propagate it to the
/// window's last sample.
pub fn multi_model_estimate(
    y_window: &DVector<f64>,
    u_window: &DVector<f64>,
    prior: &AuxiliaryPrior,
    ops: &HorizonOperators,
    settings: &SolverSettings,
) -> Result<(DVector<f64>, DecodeResult)> {
    let prob = QcbpProblem {
        ops,
        y_window,
        u_window,
        prior,
    };
    let res = solve_qcbp(&prob, settings)?;
    let x_k = propagate_estimate(&res.x_hat, &propagation_inputs(ops, u_window), ops)?;
    Ok((x_k, res))
}

fn propagation_inputs(ops: &HorizonOperators, u_window: &DVector<f64>) -> DVector<f64> {
    u_window.rows(0, ops.l * ops.window.saturating_sub(1)).into_owned()
}

/// Constants of the last-sample error bound `K1 * sat(K2 * ||e - e[s]||_2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem2Constants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub delta_2s: f64,
    pub s: usize,
    pub m: usize,
    pub sigma_bar: f64,
    pub radius: f64,
}

impl Theorem2Constants {
    pub fn new(delta_2s: f64, s: usize, m: usize, sigma_bar: f64, radius: f64) -> Result<Self> {
        let k3 = recovery_constant(delta_2s, s)?;
        if s > m {
            return Err(Error::BoundInapplicable(format!("sparsity {s} exceeds {m} channels")));
        }
        if !(sigma_bar > 0.0) || !(radius > 0.0) {
            return Err(Error::BoundInapplicable(
                "covariance scale and radius must be positive".into(),
            ));
        }
        let denom = 2.0 * radius * sigma_bar;
        Ok(Self {
            k1: denom.sqrt(),
            k2: k3 * ((m - s) as f64 / denom).sqrt(),
            k3,
            delta_2s,
            s,
            m,
            sigma_bar,
            radius,
        })
    }

    pub fn for_prior(delta_2s: f64, s: usize, prior: &AuxiliaryPrior) -> Result<Self> {
        Self::new(delta_2s, s, prior.dim(), prior.max_singular_value(), prior.radius())
    }
}

/// Ceiling on `||e_hat_T - e_T||_2` for the window error `e_window`.
pub fn theorem2_bound(consts: &Theorem2Constants, e_window: &DVector<f64>) -> f64 {
    let tail = (e_window - best_s_term(e_window, consts.s)).norm();
    if tail == 0.0 {
        return 0.0;
    }
    consts.k1 * csdecode::sat(consts.k2 * tail, 1.0)
}

/// `A x + B u + gain (y - C x - D u)`.
pub fn luenberger_step(
    sys: &DiscreteLinearSystem,
    gain: &DMatrix<f64>,
    x_hat: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> DVector<f64> {
    let innov = y - sys.output(x_hat, u);
    sys.step(x_hat, u) + gain * innov
}

/// Steady-state predictor gain `A P C^T (C P C^T + I)^-1`, where `P` solves the
/// filter Riccati equation with unit process and measurement weights.
/// Solved with the structure-preserving doubling iteration.
pub fn dare_gain(sys: &DiscreteLinearSystem) -> Result<DMatrix<f64>> {
    let n = sys.n();
    let at = sys.a.transpose();
    let mut a_k = at.clone();
    let mut g_k = sys.c.transpose() * &sys.c;
    let mut h_k = DMatrix::<f64>::identity(n, n);
    let eye = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    for _ in 0..200 {
        let w = &eye + &g_k * &h_k;
        let lu = w.lu();
        let w_inv_a = lu
            .solve(&a_k)
            .ok_or_else(|| Error::InvalidGain("Riccati doubling step is singular".into()))?;
        let w_inv_g = lu
            .solve(&g_k)
            .ok_or_else(|| Error::InvalidGain("Riccati doubling step is singular".into()))?;
        let h_next = &h_k + a_k.transpose() * &h_k * &w_inv_a;
        let g_next = &g_k + &a_k * &w_inv_g * a_k.transpose();
        let a_next = &a_k * &w_inv_a;
        let delta = (&h_next - &h_k).norm() / h_next.norm().max(1.0);
        h_k = h_next;
        g_k = g_next;
        a_k = a_next;
        if !linalg::all_finite(&h_k) {
            return Err(Error::InvalidGain("Riccati iteration diverged".into()));
        }
        if delta < 1e-14 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::InvalidGain("Riccati iteration did not converge".into()));
    }
    let p = (&h_k + h_k.transpose()) * 0.5;
    let s = &sys.c * &p * sys.c.transpose() + DMatrix::identity(sys.m(), sys.m());
    let rhs = &sys.a * &p * sys.c.transpose();
    let gain = s
        .cholesky()
        .ok_or_else(|| Error::InvalidGain("innovation covariance is not positive definite".into()))?
        .solve(&rhs.transpose())
        .transpose();
    Ok(gain)
}

/// Outcome of one observer update.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub x: DVector<f64>,
    /// Set when the observer could not produce its own estimate at this sample
    /// and fell back to model prediction.
    pub failure: Option<String>,
    pub iterations: usize,
}

/// Data available to an observer at sample `k`.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub k: usize,
    pub y: &'a DVector<f64>,
    pub u: &'a DVector<f64>,
    pub prior: Option<&'a AuxiliaryPrior>,
}

/// Estimator of the current state from the measurement stream.
pub trait Observer: Send {
    fn name(&self) -> &str;
    /// Consume sample `k` and return the estimate of `x_k`.
    fn observe(&mut self, sample: &Sample<'_>) -> Estimate;
}

#[derive(Debug, Clone)]
pub struct LuenbergerObserver {
    sys: DiscreteLinearSystem,
    gain: DMatrix<f64>,
    x_hat: DVector<f64>,
}

impl LuenbergerObserver {
    /// Fails when `A - gain C` is not Schur stable.
    pub fn new(sys: DiscreteLinearSystem, gain: DMatrix<f64>, x0: DVector<f64>) -> Result<Self> {
        if gain.nrows() != sys.n() || gain.ncols() != sys.m() {
            return Err(Error::DimensionMismatch(format!(
                "gain is {}x{}, expected {}x{}",
                gain.nrows(),
                gain.ncols(),
                sys.n(),
                sys.m()
            )));
        }
        if x0.len() != sys.n() {
            return Err(Error::DimensionMismatch("initial estimate has the wrong length".into()));
        }
        let rho = linalg::spectral_radius(&(&sys.a - &gain * &sys.c));
        if !(rho < 1.0) {
            return Err(Error::InvalidGain(format!(
                "error dynamics have spectral radius {rho:.6}"
            )));
        }
        Ok(Self { sys, gain, x_hat: x0 })
    }

    pub fn with_riccati_gain(sys: DiscreteLinearSystem, x0: DVector<f64>) -> Result<Self> {
        let gain = dare_gain(&sys)?;
        Self::new(sys, gain, x0)
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }
}

impl Observer for LuenbergerObserver {
    fn name(&self) -> &str {
        "lo"
    }

    fn observe(&mut self, sample: &Sample<'_>) -> Estimate {
        let current = self.x_hat.clone();
        self.x_hat = luenberger_step(&self.sys, &self.gain, &current, sample.u, sample.y);
        Estimate {
            x: current,
            failure: None,
            iterations: 0,
        }
    }
}

/// Sliding buffer of the last `T` measurement/input pairs with an open-loop
/// fallback prediction.
#[derive(Debug, Clone)]
struct Window {
    sys: DiscreteLinearSystem,
    ops: HorizonOperators,
    samples: VecDeque<(DVector<f64>, DVector<f64>)>,
    prediction: DVector<f64>,
}

impl Window {
    fn new(sys: DiscreteLinearSystem, ops: HorizonOperators, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != sys.n() {
            return Err(Error::DimensionMismatch("initial estimate has the wrong length".into()));
        }
        Ok(Self {
            sys,
            ops,
            samples: VecDeque::new(),
            prediction: x0,
        })
    }

    fn push(&mut self, y: &DVector<f64>, u: &DVector<f64>) {
        if self.samples.len() == self.ops.window {
            self.samples.pop_front();
        }
        self.samples.push_back((y.clone(), u.clone()));
    }

    fn full(&self) -> bool {
        self.samples.len() == self.ops.window
    }

    fn stacks(&self) -> (DVector<f64>, DVector<f64>) {
        let ys = DVector::from_iterator(
            self.ops.stacked_len(),
            self.samples.iter().flat_map(|(y, _)| y.iter().copied()),
        );
        let us = DVector::from_iterator(
            self.ops.input_len(),
            self.samples.iter().flat_map(|(_, u)| u.iter().copied()),
        );
        (ys, us)
    }

    /// Record the estimate for the newest sample and advance the prediction.
    fn finish(&mut self, x: DVector<f64>, u: &DVector<f64>, failure: Option<String>, iterations: usize) -> Estimate {
        self.prediction = self.sys.step(&x, u);
        Estimate { x, failure, iterations }
    }
}

/// Moving-horizon l1 observer without side information.
#[derive(Debug, Clone)]
pub struct L1Observer {
    win: Window,
    settings: SolverSettings,
}

impl L1Observer {
    pub fn new(sys: DiscreteLinearSystem, ops: HorizonOperators, settings: SolverSettings, x0: DVector<f64>) -> Result<Self> {
        settings.validate()?;
        ops.annihilator()?;
        Ok(Self {
            win: Window::new(sys, ops, x0)?,
            settings,
        })
    }
}

impl Observer for L1Observer {
    fn name(&self) -> &str {
        "l1o"
    }

    fn observe(&mut self, sample: &Sample<'_>) -> Estimate {
        self.win.push(sample.y, sample.u);
        let fallback = self.win.prediction.clone();
        if !self.win.full() {
            return self.win.finish(fallback, sample.u, None, 0);
        }
        let (ys, us) = self.win.stacks();
        let ops = &self.win.ops;
        let out = csdecode::l1_decode(&ys, ops, &us, &self.settings).and_then(|res| {
            let x = propagate_estimate(&res.x_hat, &propagation_inputs(ops, &us), ops)?;
            Ok((x, res.iterations))
        });
        match out {
            Ok((x, it)) => self.win.finish(x, sample.u, None, it),
            Err(e) => self.win.finish(fallback, sample.u, Some(e.to_string()), 0),
        }
    }
}

/// Moving-horizon observer constrained by the measurement prior.
#[derive(Debug, Clone)]
pub struct MultiModelObserver {
    win: Window,
    settings: SolverSettings,
    warm: Option<RegressionWarmStart>,
    last: Option<DecodeResult>,
}

impl MultiModelObserver {
    pub fn new(sys: DiscreteLinearSystem, ops: HorizonOperators, settings: SolverSettings, x0: DVector<f64>) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            win: Window::new(sys, ops, x0)?,
            settings,
            warm: None,
            last: None,
        })
    }

    /// Diagnostics of the most recent successful solve.
    pub fn last_result(&self) -> Option<&DecodeResult> {
        self.last.as_ref()
    }
}

impl Observer for MultiModelObserver {
    fn name(&self) -> &str {
        "mmo"
    }

    fn observe(&mut self, sample: &Sample<'_>) -> Estimate {
        let evicted = if self.win.full() {
            self.win.samples.front().map(|(_, u)| u.clone())
        } else {
            None
        };
        self.win.push(sample.y, sample.u);
        let fallback = self.win.prediction.clone();
        if !self.win.full() {
            return self.win.finish(fallback, sample.u, None, 0);
        }
        let Some(prior) = sample.prior else {
            return self.win.finish(fallback, sample.u, Some("no prior supplied".into()), 0);
        };
        let (ys, us) = self.win.stacks();
        let warm = match (&self.warm, evicted) {
            (Some(w), Some(u_old)) => {
                let m = self.win.ops.m;
                let x = self.win.sys.step(&w.x, &u_old);
                let mut dual = DVector::zeros(w.dual_l1.len());
                let keep = w.dual_l1.len().saturating_sub(m);
                dual.rows_mut(0, keep).copy_from(&w.dual_l1.rows(m, keep));
                Some(RegressionWarmStart { x, dual_l1: dual })
            }
            _ => None,
        };
        let ops = &self.win.ops;
        let prob = QcbpProblem {
            ops,
            y_window: &ys,
            u_window: &us,
            prior,
        };
        let out = solve_qcbp_warm(&prob, &self.settings, warm.as_ref()).and_then(|(res, next)| {
            let x = propagate_estimate(&res.x_hat, &propagation_inputs(ops, &us), ops)?;
            Ok((x, res, next))
        });
        match out {
            Ok((x, res, next)) => {
                let it = res.iterations;
                self.warm = Some(next);
                self.last = Some(res);
                self.win.finish(x, sample.u, None, it)
            }
            Err(e) => {
                self.warm = None;
                self.win.finish(fallback, sample.u, Some(e.to_string()), 0)
            }
        }
    }
}
