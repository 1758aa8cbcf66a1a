//! ADMM solvers behind the sparse decoders.
//!
//! Two splittings live here:
//!
//! * [`basis_pursuit`] solves `min ||e||_1 s.t. F e = f` directly on the
//!   annihilator form, alternating an affine projection with soft
//!   thresholding.
//! * [`constrained_l1_regression`] solves `min_x ||b - Phi x||_1` subject to an
//!   optional Euclidean ball constraint on an affine image of `x`
//!   (`||W x - c|| <= radius`). The ellipsoidal prior constraint of the
//!   multi-model observer reduces to this form after whitening.
//!
//! Both report the He–Yuan merit `||z_k - z_{k+1}||^2 + ||u_k - u_{k+1}||^2`,
//! which is non-increasing for convex two-block ADMM.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// ADMM penalty `rho`, applied to data normalised to unit max-abs.
    pub penalty: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Keep the per-iteration merit sequence in the result.
    pub record_merit: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            penalty: 1.0,
            abs_tol: 1e-9,
            rel_tol: 1e-9,
            max_iter: 20_000,
            record_merit: false,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty > 0.0 && self.penalty.is_finite()) {
            return Err(Error::config("penalty", "must be positive and finite"));
        }
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(Error::config("abs_tol/rel_tol", "tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOutput<T> {
    pub value: T,
    pub converged: bool,
    pub iterations: usize,
    pub merit: Vec<f64>,
}

pub fn soft_threshold(v: f64, k: f64) -> f64 {
    if v > k {
        v - k
    } else if v < -k {
        v + k
    } else {
        0.0
    }
}

/// Projection onto `{e : F e = f}` for a row-orthonormal `F`.
pub enum AffineProjector<'a> {
    /// `v - F^T (F v - f)`.
    Annihilator { f_mat: &'a DMatrix<f64>, f: DVector<f64> },
    /// Same set written as `b + range(U1)`, where `U1` is an orthonormal basis
    /// of `ker(F)` and `F b = f`. Cheaper when `ker(F)` is low-dimensional.
    Range { u1: &'a DMatrix<f64>, b: DVector<f64> },
}

impl AffineProjector<'_> {
    fn project_into(&self, v: &DVector<f64>, out: &mut DVector<f64>, tmp: &mut DVector<f64>) {
        match self {
            AffineProjector::Annihilator { f_mat, f } => {
                tmp.gemv(1.0, f_mat, v, 0.0);
                *tmp -= f;
                out.copy_from(v);
                out.gemv_tr(-1.0, f_mat, tmp, 1.0);
            }
            AffineProjector::Range { u1, b } => {
                out.copy_from(v);
                *out -= b;
                tmp.gemv_tr(1.0, u1, out, 0.0);
                out.copy_from(b);
                out.gemv(1.0, u1, tmp, 1.0);
            }
        }
    }

    fn inner_len(&self) -> usize {
        match self {
            AffineProjector::Annihilator { f_mat, .. } => f_mat.nrows(),
            AffineProjector::Range { u1, .. } => u1.ncols(),
        }
    }
}

/// `min ||e||_1` over the affine set described by `proj`.
pub fn basis_pursuit(
    proj: &AffineProjector<'_>,
    dim: usize,
    settings: &SolverSettings,
) -> AdmmOutput<DVector<f64>> {
    let rho = settings.penalty;
    let kappa = 1.0 / rho;
    let sqrt_p = (dim as f64).sqrt();
    let mut z = DVector::zeros(dim);
    let mut u = DVector::zeros(dim);
    let mut e = DVector::zeros(dim);
    let mut w = DVector::zeros(dim);
    let mut tmp = DVector::zeros(proj.inner_len());
    let mut merit = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=settings.max_iter {
        iterations = it;
        w.copy_from(&z);
        w -= &u;
        proj.project_into(&w, &mut e, &mut tmp);
        let (mut r_sq, mut dz_sq, mut du_sq) = (0.0, 0.0, 0.0);
        for i in 0..dim {
            let zi = soft_threshold(e[i] + u[i], kappa);
            let dz = zi - z[i];
            let r = e[i] - zi;
            z[i] = zi;
            u[i] += r;
            r_sq += r * r;
            dz_sq += dz * dz;
            du_sq += r * r;
        }
        if settings.record_merit {
            merit.push(dz_sq + du_sq);
        }
        let r_norm = r_sq.sqrt();
        let s_norm = rho * dz_sq.sqrt();
        let eps_pri = sqrt_p * settings.abs_tol + settings.rel_tol * e.norm().max(z.norm());
        let eps_dual = sqrt_p * settings.abs_tol + settings.rel_tol * rho * u.norm();
        if r_norm <= eps_pri && s_norm <= eps_dual {
            converged = true;
            break;
        }
    }
    AdmmOutput {
        value: z,
        converged,
        iterations,
        merit,
    }
}

/// Ball constraint `||w_mat x - center|| <= radius` on an affine image of `x`.
pub struct BallConstraint {
    pub w_mat: DMatrix<f64>,
    pub center: DVector<f64>,
    pub radius: f64,
}

/// Primal/dual iterates carried between consecutive windows.
#[derive(Debug, Clone)]
pub struct RegressionWarmStart {
    pub x: DVector<f64>,
    pub dual_l1: DVector<f64>,
}

/// `min_x ||b - phi x||_1` subject to an optional ball constraint.
///
/// Splitting: `w = b - phi x` (soft threshold), `v = w_mat x - center`
/// (ball projection), `x` by a cached normal-equation solve.
pub fn constrained_l1_regression(
    phi: &DMatrix<f64>,
    b: &DVector<f64>,
    ball: Option<&BallConstraint>,
    warm: Option<&RegressionWarmStart>,
    settings: &SolverSettings,
) -> Result<AdmmOutput<(DVector<f64>, DVector<f64>)>> {
    let p1 = phi.nrows();
    let n = phi.ncols();
    let p2 = ball.map_or(0, |c| c.w_mat.nrows());
    let p = p1 + p2;
    let rho = settings.penalty;
    let kappa = 1.0 / rho;

    let mut m = DMatrix::zeros(p, n);
    m.rows_mut(0, p1).copy_from(phi);
    let mut d = DVector::zeros(p);
    d.rows_mut(0, p1).copy_from(b);
    if let Some(c) = ball {
        m.rows_mut(p1, p2).copy_from(&c.w_mat);
        d.rows_mut(p1, p2).copy_from(&c.center);
    }
    // Sign pattern N = diag(I, -I): constraint m x + N z = d with z = (w, v).
    let gram = m.transpose() * &m;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::DimensionMismatch("stacked regression map is rank deficient".into()))?;
    let pinv = chol.solve(&m.transpose());

    let mut x = match warm {
        Some(w) if w.x.len() == n => w.x.clone(),
        _ => DVector::zeros(n),
    };
    let mut u = DVector::zeros(p);
    if let Some(w) = warm {
        if w.dual_l1.len() == p1 {
            u.rows_mut(0, p1).copy_from(&w.dual_l1);
        }
    }
    let mut mx = &m * &x;
    // `nz` holds N z.
    let mut nz = DVector::zeros(p);
    for i in 0..p1 {
        nz[i] = d[i] - mx[i];
    }
    if let Some(c) = ball {
        let v = project_ball(mx.rows(p1, p2) - &c.center, c.radius);
        nz.rows_mut(p1, p2).copy_from(&(-v));
    }

    let sqrt_p = (p as f64).sqrt();
    let sqrt_n = (n as f64).sqrt();
    let d_norm = d.norm();
    let mut rhs = DVector::zeros(p);
    let mut dnz = DVector::zeros(p);
    let mut v = DVector::zeros(p2);
    let mut mt_buf = DVector::zeros(n);
    let mut merit = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=settings.max_iter {
        iterations = it;
        rhs.copy_from(&d);
        rhs -= &nz;
        rhs -= &u;
        x.gemv(1.0, &pinv, &rhs, 0.0);
        mx.gemv(1.0, &m, &x, 0.0);

        dnz.copy_from(&nz);
        for i in 0..p1 {
            nz[i] = soft_threshold(d[i] - mx[i] - u[i], kappa);
        }
        if let Some(c) = ball {
            for j in 0..p2 {
                v[j] = mx[p1 + j] - c.center[j] + u[p1 + j];
            }
            let nrm = v.norm();
            let f = if nrm <= c.radius || !c.radius.is_finite() { 1.0 } else { c.radius / nrm };
            for j in 0..p2 {
                nz[p1 + j] = -v[j] * f;
            }
        }
        dnz -= &nz;
        let mut r_sq = 0.0;
        for i in 0..p {
            let r = mx[i] + nz[i] - d[i];
            u[i] += r;
            r_sq += r * r;
        }
        if settings.record_merit {
            merit.push(dnz.norm_squared() + r_sq);
        }
        let r_norm = r_sq.sqrt();
        let eps_pri = sqrt_p * settings.abs_tol + settings.rel_tol * mx.norm().max(nz.norm()).max(d_norm);
        if r_norm > eps_pri {
            continue;
        }
        mt_buf.gemv_tr(rho, &m, &dnz, 0.0);
        let s_norm = mt_buf.norm();
        mt_buf.gemv_tr(rho, &m, &u, 0.0);
        let eps_dual = sqrt_n * settings.abs_tol + settings.rel_tol * mt_buf.norm();
        if s_norm <= eps_dual {
            converged = true;
            break;
        }
    }
    let dual_l1 = u.rows(0, p1).into_owned();
    Ok(AdmmOutput {
        value: (x, dual_l1),
        converged,
        iterations,
        merit,
    })
}

fn project_ball(v: DVector<f64>, radius: f64) -> DVector<f64> {
    let nrm = v.norm();
    if nrm <= radius || !radius.is_finite() {
        v
    } else {
        v * (radius / nrm)
    }
}
