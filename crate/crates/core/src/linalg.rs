//! Dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance below which a triangular pivot counts as zero.
const RANK_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order (eigenvectors are the matching columns).
///
/// Large problems go through faer, which is several times faster than the
/// nalgebra solver at the panel sizes used in the simulations. faer is built
/// without its thread pool so results never depend on the worker count.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let s = symmetrize(m);
    if n > 32 {
        let fm = faer::Mat::<f64>::from_fn(n, n, |i, j| s[(i, j)]);
        if let Ok(eig) = fm.self_adjoint_eigen(faer::Side::Lower) {
            let values = eig.S().column_vector();
            let vectors = eig.U();
            // faer sorts ascending
            let vals = DVector::from_fn(n, |k, _| values[n - 1 - k]);
            let vecs = DMatrix::from_fn(n, n, |i, k| vectors[(i, n - 1 - k)]);
            return (vals, vecs);
        }
    }
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// `(m + m') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry (0 for an empty matrix).
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Decomposes `m = q * a` with `q' q / T = I` and `a` upper triangular.
///
/// Columns of `q` are sign-normalized so that the first entry that is
/// non-negligible (relative to the column's largest entry) is positive.
pub fn orthonormal_factor(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (t, k) = m.shape();
    if k == 0 {
        return Ok((DMatrix::zeros(t, 0), DMatrix::zeros(0, 0)));
    }
    if t < k {
        return Err(Error::Degenerate(format!(
            "cannot orthonormalize {k} columns with only {t} rows"
        )));
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let scale = (0..k).map(|j| m.column(j).norm()).fold(0.0, f64::max);
    for j in 0..k {
        if r[(j, j)].abs() <= RANK_TOL * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Degenerate(format!(
                "matrix with {k} columns is rank deficient (pivot {j} vanishes)"
            )));
        }
    }
    let sqrt_t = (t as f64).sqrt();
    for j in 0..k {
        let col = q.column(j);
        let peak = col.amax();
        let lead = col
            .iter()
            .copied()
            .find(|v| v.abs() > 1e-8 * peak)
            .unwrap_or(0.0);
        if lead < 0.0 {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    q *= sqrt_t;
    r /= sqrt_t;
    Ok((q, r))
}

/// Solves `a x = b` for a symmetric positive definite `a` (a Gram matrix).
///
/// Fails when `a` is numerically singular (reciprocal condition below 1e-13).
pub fn solve_gram(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    check_conditioning(a, what)?;
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive definite Gram matrix.
pub fn inverse_gram(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    solve_gram(a, &DMatrix::identity(n, n), what)
}

fn check_conditioning(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.nrows() == 0 {
        return Ok(());
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{what} has non-finite entries")));
    }
    let eig = SymmetricEigen::new(symmetrize(a)).eigenvalues;
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(hi > 0.0) || lo <= 1e-13 * hi {
        return Err(Error::Singular(format!(
            "{what} is singular (eigenvalues in [{lo:e}, {hi:e}])"
        )));
    }
    Ok(())
}

/// Least-squares coefficients of regressing each column of `y` on `x`:
/// returns `B` (k × n) with `y ≈ x B`.
pub fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::Dimension(format!(
            "{what}: regressors have {} rows, responses {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.ncols() == 0 {
        return Ok(DMatrix::zeros(0, y.ncols()));
    }
    solve_gram(&x.tr_mul(x), &x.tr_mul(y), what)
}

/// Horizontally concatenates matrices with the same row count.
pub fn hstack(blocks: &[&DMatrix<f64>], rows: usize) -> DMatrix<f64> {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        debug_assert_eq!(b.nrows(), rows);
        out.columns_mut(at, b.ncols()).copy_from(*b);
        at += b.ncols();
    }
    out
}
