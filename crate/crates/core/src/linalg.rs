//! Small dense linear-algebra helpers shared by the estimator.
//!
//! Everything here works on `nalgebra` dynamic matrices. The systems this crate
//! solves are tiny (a few dozen parameters at most) so the emphasis is on
//! numerical care and determinism rather than speed: least-squares problems go
//! through column-pivoted QR, condition numbers come from the singular values,
//! and sums over time periods use a fixed pairwise reduction tree so results do
//! not depend on evaluation order.

use nalgebra::{DMatrix, DVector};
use std::ops::Range;

/// Condition number above which a linear system is treated as singular.
pub const COND_LIMIT: f64 = 1e10;

/// Leaf size of the pairwise summation tree.
const PAIRWISE_BLOCK: usize = 32;

/// Failure of a dense solve: the matrix is (numerically) rank deficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Singular {
    pub condition: f64,
}

/// Ratio of the largest to the smallest singular value. Infinite for a
/// rank-deficient or empty matrix.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return f64::INFINITY;
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Minimises `‖a x − b‖₂` with a column-pivoted QR factorisation.
///
/// Requires `a.nrows() ≥ a.ncols()`; returns the solution together with the
/// condition number of `a`.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64), Singular> {
    let (m, n) = a.shape();
    assert_eq!(m, b.len(), "least_squares: row mismatch");
    if n == 0 {
        return Ok((DVector::zeros(0), 1.0));
    }
    let condition = condition_number(a);
    if m < n || !(condition <= COND_LIMIT) {
        return Err(Singular { condition });
    }
    let qr = a.clone().col_piv_qr();
    let mut qtb = b.clone();
    qr.q_tr_mul(&mut qtb);
    let r = qr.r();
    let r_sq = r.view((0, 0), (n, n)).into_owned();
    let mut y = qtb.rows(0, n).into_owned();
    if !r_sq.solve_upper_triangular_mut(&mut y) {
        return Err(Singular { condition });
    }
    qr.p().inv_permute_rows(&mut y);
    Ok((y, condition))
}

/// Solves the square system `a x = b` (column-pivoted QR, condition checked).
pub fn solve_square(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, Singular> {
    assert!(a.is_square(), "solve_square: matrix not square");
    let condition = condition_number(a);
    if !(condition <= COND_LIMIT) {
        return Err(Singular { condition });
    }
    a.clone()
        .col_piv_qr()
        .solve(b)
        .ok_or(Singular { condition })
}

/// Inverse of a square matrix, refused when ill-conditioned.
pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>, Singular> {
    solve_square(a, &DMatrix::identity(a.nrows(), a.nrows()))
}

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrises `m` and clips negative eigenvalues to zero.
///
/// Eigenvalues above `-1e-12 · max|λ|` are left alone and the matrix is
/// returned untouched (apart from symmetrisation), so PSD inputs come back
/// bit-for-bit. The flag reports whether clipping happened.
pub fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(m);
    if sym.is_empty() {
        return (sym, false);
    }
    let eig = sym.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax();
    let floor = -1e-12 * scale.max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return (sym, false);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    (symmetrize(&rebuilt), true)
}

/// Factor `R` with `RᵀR = Ω` for a symmetric PSD weight matrix.
///
/// Returns `None` when `Ω` has an eigenvalue below `-1e-10 · max|λ|`.
pub fn weight_root(omega: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = symmetrize(omega);
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return None;
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Some(DMatrix::from_diagonal(&sqrt) * eig.eigenvectors.transpose())
}

/// Sums `term(t)` over `range` with a fixed pairwise reduction tree.
///
/// `term` writes its contribution into a zeroed `rows × cols` scratch matrix.
pub fn pairwise_sum<F>(range: Range<usize>, rows: usize, cols: usize, term: &F) -> DMatrix<f64>
where
    F: Fn(usize, &mut DMatrix<f64>),
{
    let len = range.end.saturating_sub(range.start);
    if len <= PAIRWISE_BLOCK {
        let mut acc = DMatrix::zeros(rows, cols);
        let mut scratch = DMatrix::zeros(rows, cols);
        for t in range {
            scratch.fill(0.0);
            term(t, &mut scratch);
            acc += &scratch;
        }
        return acc;
    }
    let mid = range.start + len / 2;
    let left = pairwise_sum(range.start..mid, rows, cols, term);
    let right = pairwise_sum(mid..range.end, rows, cols, term);
    left + right
}

/// Column means of `u` (rows are observations), summed pairwise.
pub fn column_means(u: &DMatrix<f64>) -> DVector<f64> {
    let (n, q) = u.shape();
    if n == 0 {
        return DVector::zeros(q);
    }
    let sum = pairwise_sum(0..n, q, 1, &|t, out| {
        for j in 0..q {
            out[(j, 0)] = u[(t, j)];
        }
    });
    DVector::from_column_slice(sum.as_slice()) / n as f64
}

/// Pairwise sum of a slice.
pub fn pairwise_sum_slice(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum_slice(a) + pairwise_sum_slice(b)
}

/// Pairwise mean of a slice (NaN for an empty slice).
pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum_slice(xs) / xs.len() as f64
}
