//! Small dense linear-algebra helpers shared by the estimation modules.

use nalgebra::{Complex, DMatrix, DVector, Schur};

/// Singular values below `RANK_RTOL * sigma_max` count as zero.
pub const RANK_RTOL: f64 = 1e-10;

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn norm_l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Numerical rank with singular values below `rtol * sigma_max` treated as zero.
pub fn rank_with_tol(m: &DMatrix<f64>, rtol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax <= f64::MIN_POSITIVE {
        return 0;
    }
    sv.iter().filter(|&&s| s > rtol * smax).count()
}

pub fn rank(m: &DMatrix<f64>) -> usize {
    rank_with_tol(m, RANK_RTOL)
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let eps = (1e-13 * smax).max(f64::MIN_POSITIVE);
    svd.solve(b, eps)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Rows of `m` selected by `rows`, in the given order.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

pub fn select_cols(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Indices `0..len` not contained in the sorted slice `removed`.
pub fn complement(len: usize, removed: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(len.saturating_sub(removed.len()));
    let mut it = removed.iter().peekable();
    for i in 0..len {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Eigenvalues of a square matrix, or `None` when the Schur iteration does not
/// converge within a bounded number of sweeps.
pub fn eigenvalues(m: &DMatrix<f64>) -> Option<DVector<Complex<f64>>> {
    let budget = 200 * m.nrows().max(1) + 1000;
    Schur::try_new(m.clone(), f64::EPSILON, budget)
        .or_else(|| Schur::try_new(m.clone(), 1e3 * f64::EPSILON, budget))
        .map(|s| s.complex_eigenvalues())
}

/// Largest eigenvalue modulus of a square matrix. NaN if the eigenvalues
/// could not be computed.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    match eigenvalues(m) {
        Some(ev) => ev.iter().map(|z| z.norm()).fold(0.0_f64, f64::max),
        None => f64::NAN,
    }
}

/// Column-orthonormal bases `(U1, U2)` for the range of `m` and its orthogonal
/// complement. The rank split uses `RANK_RTOL`.
pub fn range_and_complement(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = m.nrows();
    if p == 0 {
        return (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0));
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax > f64::MIN_POSITIVE && svd.singular_values[i] > RANK_RTOL * smax)
        .collect();
    let u1 = select_cols(&u, &keep);

    // Eigenvectors of the complementary projector with unit eigenvalue span
    // the orthogonal complement of range(m).
    let proj = DMatrix::identity(p, p) - &u1 * u1.transpose();
    let eig = proj.symmetric_eigen();
    let mut idx: Vec<usize> = (0..p).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut u2 = select_cols(&eig.eigenvectors, &idx);
    // One round of re-orthogonalisation against the range basis.
    if u1.ncols() > 0 && u2.ncols() > 0 {
        let corr = &u1 * (u1.transpose() * &u2);
        u2 -= corr;
        let q = u2.clone().qr().q();
        u2 = q;
    }
    (u1, u2)
}

/// Binomial coefficient, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_skips_removed() {
        assert_eq!(complement(5, &[1, 3]), vec![0, 2, 4]);
        assert_eq!(complement(3, &[]), vec![0, 1, 2]);
        assert!(complement(2, &[0, 1]).is_empty());
    }

    #[test]
    fn binomial_small_values() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(19, 10), 92378);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(binomial(7, 0), 1);
    }

    #[test]
    fn range_complement_is_orthogonal() {
        let m = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 2.0, 3.0, -1.0]);
        let (u1, u2) = range_and_complement(&m);
        assert_eq!(u1.ncols(), 2);
        assert_eq!(u2.ncols(), 2);
        assert!(max_abs(&(u2.transpose() * &m)) < 1e-12);
        let gram = u2.transpose() * &u2;
        assert!(max_abs(&(gram - DMatrix::identity(2, 2))) < 1e-12);
    }

    #[test]
    fn rank_detects_deficiency() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert_eq!(rank(&m), 1);
        assert_eq!(rank(&DMatrix::zeros(3, 3)), 0);
    }
}
