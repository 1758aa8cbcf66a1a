//! Compressive-sensing decoders for sparse measurement corruption.
//!
//! Given stacked window measurements `y = Phi x + H u + e` with a sparse `e`,
//! the decoders recover the window's first state. [`l0_decode_bruteforce`]
//! enumerates supports and is the ground-truth oracle for small instances;
//! [`l1_decode`] solves the convex relaxation on the annihilator form
//! `min ||e||_1 s.t. F e = F (y - H u)`.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::admm::{self, AffineProjector, SolverSettings};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, DiscreteLinearSystem, HorizonOperators};

/// Enumeration limit for the support-enumerating oracles.
pub const ORACLE_LIMIT: u128 = 1_000_000;
/// Enumeration limit for the correctability certificates.
pub const CORRECTABILITY_LIMIT: u128 = 100_000;
/// Complement residual (2-norm) under which a support counts as an exact fit.
pub const EXACT_FIT_TOL: f64 = 1e-8;

/// `sat_eps(x)`: clip `x` to `[-eps, eps]`.
pub fn sat(x: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0);
    x.clamp(-eps, eps)
}

/// Keep the `s` largest-magnitude entries of `e`; ties go to the lower index.
pub fn best_s_term(e: &DVector<f64>, s: usize) -> DVector<f64> {
    let s = s.min(e.len());
    let mut idx: Vec<usize> = (0..e.len()).collect();
    idx.sort_by(|&a, &b| {
        e[b].abs()
            .partial_cmp(&e[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = DVector::zeros(e.len());
    for &i in &idx[..s] {
        out[i] = e[i];
    }
    out
}

/// Sparse error vector together with its support.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseError {
    pub values: DVector<f64>,
    pub support: Vec<usize>,
}

impl SparseError {
    pub fn new(values: DVector<f64>) -> Self {
        let support = (0..values.len()).filter(|&i| values[i] != 0.0).collect();
        Self { values, support }
    }

    /// Support after discarding entries at or below `tol` in magnitude.
    pub fn with_tolerance(values: DVector<f64>, tol: f64) -> Self {
        let support = (0..values.len()).filter(|&i| values[i].abs() > tol).collect();
        Self { values, support }
    }

    pub fn sparsity(&self) -> usize {
        self.support.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Estimate of the window's first state.
    #[serde(with = "dvec")]
    pub x_hat: DVector<f64>,
    /// Estimated stacked error `y - H u - Phi x_hat`.
    #[serde(with = "dvec")]
    pub e_hat: DVector<f64>,
    /// l1 norm of `e_hat`, or the support size for the l0 oracle.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// True when the final estimate came from the support-restricted
    /// least-squares refinement rather than the raw ADMM iterate.
    #[serde(default)]
    pub polished: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merit: Vec<f64>,
}

pub(crate) mod dvec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// How candidate supports are enumerated by the l0 oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    /// Any entries of the stacked window may be corrupted.
    #[default]
    Varying,
    /// A fixed set of channels is corrupted at every sample of the window.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct L0Decode {
    pub result: DecodeResult,
    /// Corrupted entries of the stacked window (rows), sorted.
    pub support: Vec<usize>,
    /// False when another support of the same size also fits exactly, or the
    /// complement leaves the state undetermined.
    pub unique: bool,
}

fn support_rows(mode: SupportMode, cand: &[usize], m: usize, window: usize) -> Vec<usize> {
    match mode {
        SupportMode::Varying => cand.to_vec(),
        SupportMode::Fixed => {
            let mut rows: Vec<usize> = (0..window).flat_map(|t| cand.iter().map(move |&ch| t * m + ch)).collect();
            rows.sort_unstable();
            rows
        }
    }
}

/// Brute-force `min_x ||y - H u - Phi x||_0` by enumerating supports of
/// increasing size in lexicographic order.
pub fn l0_decode_bruteforce(
    y_stack: &DVector<f64>,
    ops: &HorizonOperators,
    u_stack: &DVector<f64>,
    s_max: usize,
    mode: SupportMode,
) -> Result<L0Decode> {
    let b = ops.input_free(y_stack, u_stack)?;
    let rows = ops.stacked_len();
    let universe = match mode {
        SupportMode::Varying => rows,
        SupportMode::Fixed => ops.m,
    };
    let s_max = s_max.min(universe);
    let count = linalg::binomial(universe, s_max);
    if count > ORACLE_LIMIT {
        return Err(Error::OracleTooLarge {
            count,
            limit: ORACLE_LIMIT,
        });
    }

    let n = ops.n;
    let mut best: Option<(f64, Vec<usize>, DVector<f64>)> = None;
    let mut iterations = 0usize;
    for k in 0..=s_max {
        let mut found: Option<(Vec<usize>, DVector<f64>, bool)> = None;
        let mut unique = true;
        for cand in (0..universe).combinations(k) {
            iterations += 1;
            let removed = support_rows(mode, &cand, ops.m, ops.window);
            let keep = linalg::complement(rows, &removed);
            let sub = linalg::select_rows(&ops.phi, &keep);
            let rhs = linalg::select_entries(&b, &keep);
            let x = linalg::lstsq(&sub, &rhs);
            let resid = (&sub * &x - &rhs).norm();
            if resid <= EXACT_FIT_TOL {
                match &found {
                    None => {
                        let determined = linalg::rank(&sub) == n;
                        found = Some((removed, x, determined));
                    }
                    Some((_, x0, _)) => {
                        if (&x - x0).norm() > 1e-6 * (1.0 + x0.norm()) {
                            unique = false;
                        }
                    }
                }
            } else if best.as_ref().map_or(true, |(r, _, _)| resid < *r) {
                best = Some((resid, removed, x));
            }
        }
        if let Some((support, x, determined)) = found {
            let mut e = &b - &ops.phi * &x;
            for i in linalg::complement(rows, &support) {
                e[i] = 0.0;
            }
            let nnz = e.iter().filter(|v| v.abs() > 0.0).count();
            return Ok(L0Decode {
                result: DecodeResult {
                    x_hat: x,
                    e_hat: e,
                    objective: nnz as f64,
                    converged: true,
                    iterations,
                    polished: false,
                    merit: Vec::new(),
                },
                support,
                unique: unique && determined,
            });
        }
    }
    // No exact fit within the budget: report the smallest complement residual.
    let (_, support, x) = best.unwrap_or_else(|| (f64::INFINITY, Vec::new(), DVector::zeros(n)));
    let e = &b - &ops.phi * &x;
    let nnz = e.iter().filter(|v| v.abs() > EXACT_FIT_TOL).count();
    Ok(L0Decode {
        result: DecodeResult {
            x_hat: x,
            e_hat: e,
            objective: nnz as f64,
            converged: false,
            iterations,
            polished: false,
            merit: Vec::new(),
        },
        support,
        unique: false,
    })
}

/// Relative thresholds tried when splitting a residual into support and
/// complement for the least-squares refinement.
const POLISH_THRESHOLDS: [f64; 4] = [1e-9, 1e-7, 1e-5, 1e-3];

/// Candidate refinements: least squares on the rows whose residual is below a
/// threshold. Yields `(x, objective)` pairs for full-rank complements.
pub(crate) fn polish_candidates(phi: &DMatrix<f64>, b: &DVector<f64>, residual: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = phi.ncols();
    let scale = residual.amax().max(b.amax()).max(f64::MIN_POSITIVE);
    let mut seen: Vec<Vec<usize>> = Vec::new();
    let mut out = Vec::new();
    for t in POLISH_THRESHOLDS {
        let keep: Vec<usize> = (0..b.len()).filter(|&i| residual[i].abs() <= t * scale).collect();
        if keep.len() < n || seen.contains(&keep) {
            continue;
        }
        let sub = linalg::select_rows(phi, &keep);
        if linalg::rank(&sub) < n {
            continue;
        }
        let x = linalg::lstsq(&sub, &linalg::select_entries(b, &keep));
        seen.push(keep);
        out.push(x);
    }
    out
}

/// Objective slack when comparing a refinement against the ADMM iterate.
pub(crate) fn objective_slack(b: &DVector<f64>) -> f64 {
    1e-9 * (1.0 + linalg::norm_l1(b))
}

/// Convex relaxation of the l0 decoder, solved as basis pursuit on the
/// annihilator form and followed by least squares on the complement of the
/// recovered support.
pub fn l1_decode(
    y_stack: &DVector<f64>,
    ops: &HorizonOperators,
    u_stack: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<DecodeResult> {
    settings.validate()?;
    let f_mat = ops.annihilator()?;
    let b = ops.input_free(y_stack, u_stack)?;
    let rows = b.len();
    if rows <= ops.n {
        return Err(Error::AnnihilatorUnavailable(format!(
            "stacked window has {rows} rows for {} states; nothing to decode",
            ops.n
        )));
    }
    let scale = b.amax();
    if scale == 0.0 {
        return Ok(DecodeResult {
            x_hat: DVector::zeros(ops.n),
            e_hat: DVector::zeros(rows),
            objective: 0.0,
            converged: true,
            iterations: 0,
            polished: false,
            merit: Vec::new(),
        });
    }
    let bs = &b / scale;
    let proj = match (&ops.range_basis, f_mat.nrows() > ops.n) {
        (Some(u1), true) => AffineProjector::Range { u1, b: bs.clone() },
        _ => AffineProjector::Annihilator {
            f_mat,
            f: f_mat * &bs,
        },
    };
    let out = admm::basis_pursuit(&proj, rows, settings);
    let e_admm = &out.value * scale;
    let x_admm = linalg::lstsq(&ops.phi, &(&b - &e_admm));

    let mut x_best = x_admm;
    let mut obj_best = linalg::norm_l1(&(&b - &ops.phi * &x_best));
    let mut polished = false;
    let slack = objective_slack(&b);
    for x in polish_candidates(&ops.phi, &b, &e_admm) {
        let obj = linalg::norm_l1(&(&b - &ops.phi * &x));
        if obj <= obj_best + slack {
            if !polished || obj < obj_best {
                x_best = x;
                obj_best = obj;
            }
            polished = true;
        }
    }
    let e_hat = &b - &ops.phi * &x_best;
    Ok(DecodeResult {
        objective: linalg::norm_l1(&e_hat),
        x_hat: x_best,
        e_hat,
        converged: out.converged,
        iterations: out.iterations,
        polished,
        merit: out.merit,
    })
}

/// Restricted isometry constant of `f` (columns used as-is), by enumerating
/// all column subsets of size `s`. Eigenvalue interlacing makes the subsets of
/// maximal size dominate the smaller ones.
pub fn rip_constant_bruteforce(f: &DMatrix<f64>, s: usize) -> Result<f64> {
    let cols = f.ncols();
    let s = s.min(cols);
    if s == 0 {
        return Ok(0.0);
    }
    let count = linalg::binomial(cols, s);
    if count > ORACLE_LIMIT {
        return Err(Error::OracleTooLarge {
            count,
            limit: ORACLE_LIMIT,
        });
    }
    let gram = f.transpose() * f;
    let mut delta = 0.0_f64;
    for cand in (0..cols).combinations(s) {
        let sub = DMatrix::from_fn(s, s, |i, j| gram[(cand[i], cand[j])]);
        let eig = sub.symmetric_eigen();
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        delta = delta.max(lmax - 1.0).max(1.0 - lmin);
    }
    Ok(delta)
}

/// `1 / sqrt(2)`, the RIP threshold for exact l1 recovery.
pub const RIP_THRESHOLD: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Recovery constant `(2/sqrt(s)) * ((d + sqrt(d (1/sqrt2 - d))) / (sqrt2 (1/sqrt2 - d)) + 1)`
/// for `d = delta_2s`.
pub fn recovery_constant(delta_2s: f64, s: usize) -> Result<f64> {
    if s == 0 {
        return Err(Error::BoundInapplicable("sparsity must be at least 1".into()));
    }
    if !(0.0..RIP_THRESHOLD).contains(&delta_2s) {
        return Err(Error::BoundInapplicable(format!(
            "delta_2s = {delta_2s} is outside [0, 1/sqrt(2))"
        )));
    }
    let gap = RIP_THRESHOLD - delta_2s;
    let ratio = (delta_2s + (delta_2s * gap).sqrt()) / (std::f64::consts::SQRT_2 * gap);
    Ok(2.0 / (s as f64).sqrt() * (ratio + 1.0))
}

/// l1-recovery error ceiling `K3 * ||e - e[s]||_1`.
pub fn theorem1_bound(delta_2s: f64, s: usize, e: &DVector<f64>) -> Result<f64> {
    let k3 = recovery_constant(delta_2s, s)?;
    let tail = e - best_s_term(e, s);
    Ok(k3 * linalg::norm_l1(&tail))
}

/// Whether `s` corrupted channels (the same channels over the window) are
/// correctable after `window` steps: deleting any `2s` channels from every
/// block of the stacked observability map must leave rank `n`.
pub fn correctability_fixed(sys: &DiscreteLinearSystem, window: usize, s: usize) -> Result<bool> {
    let m = sys.m();
    let n = sys.n();
    let k = 2 * s;
    if k > m {
        return Ok(n == 0);
    }
    let count = linalg::binomial(m, k);
    if count > CORRECTABILITY_LIMIT {
        return Err(Error::OracleTooLarge {
            count,
            limit: CORRECTABILITY_LIMIT,
        });
    }
    let phi = model::observability_stack(&sys.a, &sys.c, window);
    for cand in (0..m).combinations(k) {
        let removed = support_rows(SupportMode::Fixed, &cand, m, window);
        let keep = linalg::complement(phi.nrows(), &removed);
        if linalg::rank(&linalg::select_rows(&phi, &keep)) < n {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Whether `s` corrupted entries per window, at arbitrary positions, are
/// correctable: deleting any `2s` rows of the stacked observability map must
/// leave rank `n`.
pub fn correctability_varying(sys: &DiscreteLinearSystem, window: usize, s: usize) -> Result<bool> {
    let n = sys.n();
    let phi = model::observability_stack(&sys.a, &sys.c, window);
    let rows = phi.nrows();
    let k = 2 * s;
    if k > rows {
        return Ok(n == 0);
    }
    let count = linalg::binomial(rows, k);
    if count > CORRECTABILITY_LIMIT {
        return Err(Error::OracleTooLarge {
            count,
            limit: CORRECTABILITY_LIMIT,
        });
    }
    for cand in (0..rows).combinations(k) {
        let keep = linalg::complement(rows, &cand);
        if linalg::rank(&linalg::select_rows(&phi, &keep)) < n {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_horizon_operators;

    #[test]
    fn sat_examples() {
        assert_eq!(sat(0.5, 1.0), 0.5);
        assert_eq!(sat(2.0, 1.0), 1.0);
        assert_eq!(sat(-2.0, 1.0), -1.0);
        assert_eq!(sat(-1.0, 1.0), -1.0);
    }

    #[test]
    fn best_s_term_examples() {
        let e = DVector::from_vec(vec![3.0, -1.0, 0.5]);
        assert_eq!(best_s_term(&e, 1), DVector::from_vec(vec![3.0, 0.0, 0.0]));
        assert_eq!(best_s_term(&e, 3), e);
        let tie = DVector::from_vec(vec![2.0, -2.0, 1.0]);
        assert_eq!(best_s_term(&tie, 1), DVector::from_vec(vec![2.0, 0.0, 0.0]));
    }

    #[test]
    fn sparse_error_support() {
        let e = SparseError::new(DVector::from_vec(vec![0.0, 1.0, 0.0, -2.0]));
        assert_eq!(e.support, vec![1, 3]);
        assert_eq!(e.sparsity(), 2);
        let t = SparseError::with_tolerance(DVector::from_vec(vec![1e-12, 1.0]), 1e-9);
        assert_eq!(t.support, vec![1]);
    }

    #[test]
    fn rip_examples() {
        let eye = DMatrix::<f64>::identity(4, 3);
        assert!(rip_constant_bruteforce(&eye, 2).unwrap().abs() < 1e-12);

        // Columns e1, e2 and (e1 + e2)/sqrt(2) in R^3 padded; s = 2 picks the
        // worst pair: Gram [[1, 1/sqrt2], [1/sqrt2, 1]] with eigenvalues 1 +- 1/sqrt2.
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let f = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, r, 0.0, 1.0, r]);
        let d = rip_constant_bruteforce(&f, 2).unwrap();
        assert!((d - r).abs() < 1e-12);

        let dup = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert!(rip_constant_bruteforce(&dup, 2).unwrap() >= 1.0 - 1e-12);

        let big = DMatrix::<f64>::zeros(2, 60);
        assert!(matches!(
            rip_constant_bruteforce(&big, 10),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn theorem1_examples() {
        let sparse = DVector::from_vec(vec![0.0, 5.0, 0.0, -1.0]);
        assert_eq!(theorem1_bound(0.3, 2, &sparse).unwrap(), 0.0);
        // delta = 0.25, s = 4, unit tail; constant evaluated independently.
        let e = DVector::from_vec(vec![9.0, 9.0, 9.0, 9.0, 1.0]);
        let b = theorem1_bound(0.25, 4, &e).unwrap();
        assert!((b - 1.9096626910970547).abs() < 1e-12);
        assert!(theorem1_bound(RIP_THRESHOLD, 1, &e).is_err());
        let near = theorem1_bound(RIP_THRESHOLD - 1e-9, 1, &e).unwrap();
        let far = theorem1_bound(0.5, 1, &e).unwrap();
        assert!(near > far && near > 1e3);
    }

    #[test]
    fn correctability_examples() {
        let eye = DiscreteLinearSystem::autonomous(DMatrix::identity(2, 2), DMatrix::identity(2, 2), 1.0).unwrap();
        assert!(correctability_fixed(&eye, 2, 0).unwrap());
        assert!(!correctability_fixed(&eye, 2, 1).unwrap());

        let scalar = DiscreteLinearSystem::autonomous(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            1.0,
        )
        .unwrap();
        assert!(correctability_varying(&scalar, 3, 1).unwrap());
        assert!(!correctability_varying(&scalar, 2, 1).unwrap());
        assert!(correctability_varying(&scalar, 1, 0).unwrap());
    }

    #[test]
    fn zero_attack_decodes_exactly() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let c = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let sys = DiscreteLinearSystem::autonomous(a, c, 1.0).unwrap();
        let ops = build_horizon_operators(&sys, 2).unwrap();
        let x0 = DVector::from_vec(vec![0.7, -0.4]);
        let y = &ops.phi * &x0;
        let u = DVector::zeros(0);
        let l0 = l0_decode_bruteforce(&y, &ops, &u, 1, SupportMode::Varying).unwrap();
        assert!(l0.support.is_empty());
        assert!((&l0.result.x_hat - &x0).norm() < 1e-12);
        let l1 = l1_decode(&y, &ops, &u, &SolverSettings::default()).unwrap();
        assert!((&l1.x_hat - &x0).norm() < 1e-9);
        assert!(l1.objective < 1e-9);
    }

    #[test]
    fn single_attacked_channel_is_located() {
        // n = 2, m = 3, T = 2; channel 1 attacked at both samples.
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let c = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let sys = DiscreteLinearSystem::autonomous(a, c, 1.0).unwrap();
        let ops = build_horizon_operators(&sys, 2).unwrap();
        let x0 = DVector::from_vec(vec![0.7, -0.4]);
        let mut y = &ops.phi * &x0;
        y[1] += 2.5;
        y[4] += 2.5;
        let u = DVector::zeros(0);
        let fixed = l0_decode_bruteforce(&y, &ops, &u, 1, SupportMode::Fixed).unwrap();
        assert_eq!(fixed.support, vec![1, 4]);
        assert!(fixed.unique);
        assert!((&fixed.result.x_hat - &x0).norm() < 1e-10);
        assert!((fixed.result.e_hat[1] - 2.5).abs() < 1e-10);
    }

    #[test]
    fn non_correctable_instance_flags_ambiguity() {
        // Two identical channels: corrupting either one yields two exact fits.
        let sys = DiscreteLinearSystem::autonomous(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            1.0,
        )
        .unwrap();
        let ops = build_horizon_operators(&sys, 1).unwrap();
        let y = DVector::from_vec(vec![1.0, 3.0]);
        let out = l0_decode_bruteforce(&y, &ops, &DVector::zeros(0), 1, SupportMode::Varying).unwrap();
        assert_eq!(out.support, vec![0]);
        assert!(!out.unique);
        assert!((out.result.x_hat[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_guard() {
        let sys = DiscreteLinearSystem::autonomous(DMatrix::identity(2, 2), DMatrix::identity(2, 2), 1.0).unwrap();
        let ops = build_horizon_operators(&sys, 40).unwrap();
        let y = DVector::zeros(80);
        assert!(matches!(
            l0_decode_bruteforce(&y, &ops, &DVector::zeros(0), 6, SupportMode::Varying),
            Err(Error::OracleTooLarge { .. })
        ));
    }
}
