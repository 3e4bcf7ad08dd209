//! Small-sample bias correction of the variance parameters.
//!
//! The residual second moment underestimates Ω by Ψ_i = ∂μ_iᵀ Σ_θ̂ ∂μ_i.
//! Algorithm 1 adds the average Ψ back, refits θ_Σ to Ω(θ̂) + Ψ̄ by least
//! squares and iterates with the updated information. Algorithm 2 additionally
//! replaces n in the information's trace term by effective sample sizes built
//! from generalized leverages of corrected residuals.

use crate::estimation::{FitResult, FitStatus};
use crate::linalg::{least_squares, spd_inverse, spectral_norm_sym, symmetrize};
use crate::model_spec::ParameterTable;
use crate::moments::{conditional_moments, expected_information, MomentBundle, MomentError, Order};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOptions {
    pub max_iter: usize,
    /// Frobenius tolerance on successive Ω̂ estimates.
    pub tol_frob: f64,
    /// Anderson acceleration depth for the variance-parameter fixed point;
    /// 0 runs the plain iteration.
    pub acceleration: usize,
}

impl Default for CorrectionOptions {
    fn default() -> Self {
        CorrectionOptions {
            max_iter: 100,
            tol_frob: 1e-5,
            acceleration: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    One,
    Two,
    /// Algorithm 2 hit a non positive definite H_i and was rerun as Algorithm 1.
    TwoFellBackToOne,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::One => "1",
            Algorithm::Two => "2",
            Algorithm::TwoFellBackToOne => "2->1",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrectionError {
    #[error("base fit did not converge ({0})")]
    NotConverged(FitStatus),
    #[error("{p_mu} mean parameters for {n} observations: the correction needs p_mu < n")]
    TooManyMeanParameters { p_mu: usize, n: usize },
    #[error("variance parameters are not identified from Omega (rank-deficient design)")]
    RankDeficient,
    #[error("corrected information singular at iteration {0}")]
    SingularInformation(usize),
    #[error("corrected Omega is not positive definite at iteration {0}")]
    InvalidOmega(usize),
    #[error("H_i not positive definite for observations {0:?}")]
    NotPositiveDefinite(Vec<usize>),
    #[error("effective sample size {value} for endogenous variable {index} is not positive")]
    NonPositiveEffectiveSize { index: usize, value: f64 },
    #[error("matrix has a materially negative eigenvalue {0}")]
    NegativeEigenvalue(f64),
    #[error(transparent)]
    Moments(#[from] MomentError),
}

/// One pass of the correction loop.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// ‖Ω̂^(k) − Ω̂^(k−1)‖_F
    pub omega_change: f64,
    /// Spectral norm of Ψ̄^(k).
    pub psi_norm: f64,
    pub n_eff: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct CorrectedFit {
    pub base: FitResult,
    pub psi_bar: DMatrix<f64>,
    pub psi_i: Vec<DMatrix<f64>>,
    /// θ̂ with the variance parameters replaced by their corrected values.
    pub theta_c: DVector<f64>,
    /// Corrected values of `table.variance_indices()`, in that order.
    pub theta_sigma_c: DVector<f64>,
    /// Ω(θ̂) + Ψ̄
    pub omega_c: DMatrix<f64>,
    /// Moments at `theta_c`.
    pub bundle_c: MomentBundle,
    pub info_c: DMatrix<f64>,
    pub vcov_c: DMatrix<f64>,
    /// Effective sample sizes; all n outside Algorithm 2.
    pub n_eff: DVector<f64>,
    pub xi_c: Option<DMatrix<f64>>,
    pub iterations: usize,
    pub algorithm: Algorithm,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
    /// Observations whose H_i was not positive definite (fallback only).
    pub failed_observations: Vec<usize>,
}

/// Ψ_i = ∂μ_iᵀ Σ ∂μ_i for the p×m gradient of one observation.
pub fn bias_psi(d_mu_i: &DMatrix<f64>, vcov: &DMatrix<f64>) -> DMatrix<f64> {
    let mut psi = d_mu_i.transpose() * vcov * d_mu_i;
    symmetrize(&mut psi);
    psi
}

/// p×m gradient ∂μ_i/∂θ of observation i.
pub fn observation_gradient(bundle: &MomentBundle, i: usize) -> DMatrix<f64> {
    let (p, m) = (bundle.p(), bundle.m());
    DMatrix::from_fn(p, m, |k, t| bundle.d_mu[k][(i, t)])
}

/// Least-squares θ_Σ such that Ω(θ) ≈ `omega_target`, with every parameter
/// outside θ_Σ (in particular Λ̂ and B̂) taken from `theta`. Off-diagonal
/// cells carry weight 2.
pub fn solve_variance_params(
    omega_target: &DMatrix<f64>,
    theta: &DVector<f64>,
    table: &ParameterTable,
) -> Result<DVector<f64>, CorrectionError> {
    let idx = table.variance_indices();
    let m = table.m();
    let bundle = conditional_moments(table, theta, &DMatrix::zeros(0, table.l()), Order::First)?;
    let mut fixed = bundle.omega.clone();
    for &k in &idx {
        fixed -= &bundle.d_omega[k] * theta[k];
    }
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|s| (s..m).map(move |t| (s, t))).collect();
    let w = |s: usize, t: usize| if s == t { 1.0 } else { std::f64::consts::SQRT_2 };
    let z = DMatrix::from_fn(cells.len(), idx.len(), |r, c| {
        let (s, t) = cells[r];
        w(s, t) * bundle.d_omega[idx[c]][(s, t)]
    });
    let rhs = DVector::from_fn(cells.len(), |r, _| {
        let (s, t) = cells[r];
        w(s, t) * (omega_target[(s, t)] - fixed[(s, t)])
    });
    least_squares(&z, &rhs).ok_or(CorrectionError::RankDeficient)
}

/// Symmetric PSD square root; eigenvalues down to −1e-10‖M‖ are clamped to 0.
pub fn matrix_sqrt_sym(m: &DMatrix<f64>) -> Result<DMatrix<f64>, CorrectionError> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let norm = eig.eigenvalues.iter().fold(0.0, |a: f64, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-10 * norm {
        return Err(CorrectionError::NegativeEigenvalue(min));
    }
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let mut r = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    symmetrize(&mut r);
    Ok(r)
}

/// ξ^c_i = ξ_i Ω^½ H_i^{−½} Ω^½ with H_i = Ω² − Ω^½ Ψ_i Ω^½.
pub fn corrected_residuals(
    omega: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    psi_i: &[DMatrix<f64>],
) -> Result<DMatrix<f64>, CorrectionError> {
    let half = matrix_sqrt_sym(omega)?;
    let omega2 = omega * omega;
    let rows: Vec<Result<DVector<f64>, usize>> = (0..xi.nrows())
        .into_par_iter()
        .map(|i| {
            let mut h = &omega2 - &half * &psi_i[i] * &half;
            symmetrize(&mut h);
            let eig = h.symmetric_eigen();
            let max = eig.eigenvalues.iter().fold(0.0, |a: f64, v| a.max(v.abs()));
            if eig.eigenvalues.iter().any(|&v| !(v > 1e-12 * max)) {
                return Err(i);
            }
            let d = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
            let h_inv_half = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
            let t = &half * h_inv_half * &half;
            Ok((xi.row(i) * t).transpose())
        })
        .collect();
    let failed: Vec<usize> = rows.iter().filter_map(|r| r.as_ref().err().copied()).collect();
    if !failed.is_empty() {
        return Err(CorrectionError::NotPositiveDefinite(failed));
    }
    let mut out = DMatrix::zeros(xi.nrows(), xi.ncols());
    for (i, r) in rows.into_iter().enumerate() {
        out.set_row(i, &r.expect("checked").transpose());
    }
    Ok(out)
}

/// Diagonals of ∂μ_i/∂Y_i = ∂μ_iᵀ Σ ∂S_i/∂Y_i, where row k of ∂S_i/∂Y_i is
/// ∂μ_ik Ω⁻¹ + ξ_i Ω⁻¹ ∂Ω/∂θ_k Ω⁻¹.
fn leverage_parts(
    grads: &[DMatrix<f64>],
    vcov: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    d_omega: &[DMatrix<f64>],
    var_active: &[bool],
    omega_inv: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (n, m, p) = (xi.nrows(), xi.ncols(), vcov.nrows());
    let od: Vec<Option<DMatrix<f64>>> = (0..p)
        .map(|k| var_active[k].then(|| omega_inv * &d_omega[k] * omega_inv))
        .collect();
    let rows: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = &grads[i];
            let mut ds = g * omega_inv;
            let x = xi.row(i);
            for (k, o) in od.iter().enumerate() {
                if let Some(o) = o {
                    let r = x * o;
                    for t in 0..m {
                        ds[(k, t)] += r[t];
                    }
                }
            }
            let w = g.transpose() * vcov;
            DVector::from_fn(m, |t, _| w.row(t).dot(&ds.column(t).transpose()))
        })
        .collect();
    let mut out = DMatrix::zeros(n, m);
    for (i, r) in rows.into_iter().enumerate() {
        out.set_row(i, &r.transpose());
    }
    out
}

/// Per-observation diagonal generalized leverages (n×m) at the fitted values,
/// plugging `xi` into the score derivative.
pub fn leverage(fit: &FitResult, xi: &DMatrix<f64>) -> DMatrix<f64> {
    let grads: Vec<DMatrix<f64>> = (0..fit.data.n()).map(|i| observation_gradient(&fit.bundle, i)).collect();
    leverage_parts(
        &grads,
        &fit.vcov,
        xi,
        &fit.bundle.d_omega,
        &fit.bundle.var_active,
        &fit.bundle.omega_inv,
    )
}

/// n^c_t = n − Σ_i leverage_it
pub fn effective_sample_size(leverages: &DMatrix<f64>) -> Result<DVector<f64>, CorrectionError> {
    let n = leverages.nrows() as f64;
    let ne = DVector::from_iterator(leverages.ncols(), leverages.column_iter().map(|c| n - c.sum()));
    if let Some((index, &value)) = ne.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(CorrectionError::NonPositiveEffectiveSize { index, value });
    }
    Ok(ne)
}

fn check_base(fit: &FitResult) -> Result<(), CorrectionError> {
    if !fit.converged() {
        return Err(CorrectionError::NotConverged(fit.status));
    }
    let p_mu = fit.table.mean_indices().len();
    let n = fit.data.n();
    if fit.table.is_mean_variance() && p_mu >= n {
        return Err(CorrectionError::TooManyMeanParameters { p_mu, n });
    }
    Ok(())
}

/// Algorithm 1: bias-corrected variance parameters and information.
pub fn algorithm1(fit: &FitResult, options: &CorrectionOptions) -> Result<CorrectedFit, CorrectionError> {
    check_base(fit)?;
    iterate(fit, options, false)
}

/// Algorithm 2: Algorithm 1 plus effective sample sizes in the information.
/// Falls back to Algorithm 1 when some H_i is not positive definite.
pub fn algorithm2(fit: &FitResult, options: &CorrectionOptions) -> Result<CorrectedFit, CorrectionError> {
    check_base(fit)?;
    match iterate(fit, options, true) {
        Err(CorrectionError::NotPositiveDefinite(failed)) => {
            let mut c = iterate(fit, options, false)?;
            c.algorithm = Algorithm::TwoFellBackToOne;
            c.failed_observations = failed;
            Ok(c)
        }
        other => other,
    }
}

/// Anderson mixing for x = G(x): keeps the last `depth` differences of x and
/// of the residual G(x) − x.
struct Anderson {
    depth: usize,
    prev: Option<(DVector<f64>, DVector<f64>)>,
    dg: Vec<DVector<f64>>,
    df: Vec<DVector<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Anderson {
            depth,
            prev: None,
            dg: Vec::new(),
            df: Vec::new(),
        }
    }

    fn clear(&mut self) {
        self.prev = None;
        self.dg.clear();
        self.df.clear();
    }

    /// Mixed next iterate from x and g = G(x); `None` means take g.
    fn step(&mut self, x: &DVector<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
        let f = g - x;
        if let Some((pg, pf)) = self.prev.take() {
            self.dg.push(g - pg);
            self.df.push(&f - pf);
            if self.dg.len() > self.depth {
                self.dg.remove(0);
                self.df.remove(0);
            }
        }
        self.prev = Some((g.clone(), f.clone()));
        if self.df.is_empty() {
            return None;
        }
        let fm = DMatrix::from_columns(&self.df);
        let gamma = least_squares(&fm, &f)?;
        Some(g - DMatrix::from_columns(&self.dg) * gamma)
    }
}

fn iterate(fit: &FitResult, options: &CorrectionOptions, effective: bool) -> Result<CorrectedFit, CorrectionError> {
    let table = &fit.table;
    let (n, m) = (fit.data.n(), table.m());
    let idx = table.variance_indices();
    let omega0 = fit.bundle.omega.clone();
    let grads: Vec<DMatrix<f64>> = (0..n).map(|i| observation_gradient(&fit.bundle, i)).collect();

    let mut vcov = fit.vcov.clone();
    let mut bundle_c = fit.bundle.clone();
    let mut omega_prev = omega0.clone();
    let mut n_eff = DVector::from_element(m, n as f64);
    let mut theta_c = fit.theta_hat.clone();
    let mut trace = Vec::new();
    let mut xi_c = None;
    let mut converged = false;
    let mut result = None;
    let mut state = DVector::from_iterator(idx.len(), idx.iter().map(|&k| fit.theta_hat[k]));
    let mut anderson = Anderson::new(options.acceleration);

    for k in 1..=options.max_iter {
        let psi_i: Vec<DMatrix<f64>> = grads.par_iter().map(|g| bias_psi(g, &vcov)).collect();
        let mut psi_bar = DMatrix::zeros(m, m);
        for p in &psi_i {
            psi_bar += p;
        }
        psi_bar /= n as f64;
        if effective {
            let xc = corrected_residuals(&bundle_c.omega, &fit.residuals, &psi_i)?;
            let lev = leverage_parts(
                &grads,
                &vcov,
                &xc,
                &bundle_c.d_omega,
                &bundle_c.var_active,
                &bundle_c.omega_inv,
            );
            n_eff = effective_sample_size(&lev)?;
            xi_c = Some(xc);
        }
        let omega_hat = &omega0 + &psi_bar;
        let plain = solve_variance_params(&omega_hat, &fit.theta_hat, table)?;
        let mut theta_sigma = plain.clone();
        if options.acceleration > 0 {
            if let Some(acc) = anderson.step(&state, &plain) {
                theta_sigma = acc;
            }
        }
        let mut attempt = 0;
        loop {
            theta_c = fit.theta_hat.clone();
            for (j, &kk) in idx.iter().enumerate() {
                theta_c[kk] = theta_sigma[j];
            }
            bundle_c = conditional_moments(table, &theta_c, &fit.data.x, Order::First)?;
            if bundle_c.valid {
                break;
            }
            if attempt > 0 || theta_sigma == plain {
                return Err(CorrectionError::InvalidOmega(k));
            }
            anderson.clear();
            theta_sigma = plain.clone();
            attempt += 1;
        }
        state = theta_sigma.clone();
        let info_c = expected_information(&bundle_c, Some(&n_eff))?;
        vcov = spd_inverse(&info_c).ok_or(CorrectionError::SingularInformation(k))?;
        let change = (&omega_hat - &omega_prev).norm();
        trace.push(IterationRecord {
            omega_change: change,
            psi_norm: spectral_norm_sym(&psi_bar),
            n_eff: n_eff.clone(),
        });
        omega_prev = omega_hat.clone();
        result = Some((psi_bar, psi_i, theta_sigma, omega_hat, info_c));
        if change < options.tol_frob {
            converged = true;
            break;
        }
    }
    let (psi_bar, psi_i, theta_sigma_c, omega_c, info_c) = result.expect("max_iter >= 1");
    Ok(CorrectedFit {
        base: fit.clone(),
        psi_bar,
        psi_i,
        theta_c,
        theta_sigma_c,
        omega_c,
        bundle_c,
        info_c,
        vcov_c: vcov,
        n_eff,
        xi_c,
        iterations: trace.len(),
        algorithm: if effective { Algorithm::Two } else { Algorithm::One },
        converged,
        trace,
        failed_observations: Vec::new(),
    })
}
