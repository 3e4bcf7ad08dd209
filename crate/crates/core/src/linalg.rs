//! Small dense linear-algebra helpers shared by the numerical modules.

use nalgebra::{DMatrix, DVector};

/// Minimum ratio of smallest to largest Cholesky pivot (squared diagonal)
/// accepted as positive definite.
pub const PIVOT_RATIO: f64 = 1e-12;

/// Inverse and log-determinant of a symmetric positive definite matrix, or
/// `None` when the factorization fails or is numerically degenerate.
pub fn spd_inverse_logdet(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let n = a.nrows();
    if n == 0 {
        return Some((DMatrix::zeros(0, 0), 0.0));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    let pivots: Vec<f64> = (0..n).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = pivots.iter().cloned().fold(0.0, f64::max);
    let min = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > PIVOT_RATIO * max) {
        return None;
    }
    let logdet = pivots.iter().map(|p| p.ln()).sum();
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some((inv, logdet))
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    spd_inverse_logdet(a).map(|(i, _)| i)
}

/// Replaces `a` by (a + aᵀ)/2.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Σ_{ij} a_ij b_ij
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Σ_t w_t (A B)_tt
pub fn weighted_trace_prod(w: &DVector<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a.nrows();
    let mut s = 0.0;
    for t in 0..m {
        let mut d = 0.0;
        for u in 0..m {
            d += a[(t, u)] * b[(u, t)];
        }
        s += w[t] * d;
    }
    s
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm_sym(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

/// Least-squares coefficients of `y` on the columns of `x`; `None` when `x`
/// is rank deficient.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    if x.ncols() == 0 {
        return Some(DVector::zeros(0));
    }
    let svd = x.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max() * (x.nrows().max(x.ncols()) as f64);
    if svd.rank(tol) < x.ncols() {
        return None;
    }
    svd.solve(y, tol).ok()
}
