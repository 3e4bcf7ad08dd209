//! Maximum likelihood estimation by Fisher scoring.

use crate::data::Dataset;
use crate::linalg::{least_squares, spd_inverse};
use crate::model_spec::{CellValue, Matrix, ParameterTable};
use crate::moments::{
    conditional_moments, expected_information, log_likelihood, score, MomentBundle, MomentError,
    Order,
};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative log-likelihood change |Δℓ| / max(|ℓ|, 1).
    pub tol_loglik: f64,
    /// Maximum absolute total score.
    pub tol_score: f64,
    pub max_halvings: usize,
    /// Standard errors above this flag the fit as [`FitStatus::HugeSe`].
    pub huge_se: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 200,
            tol_loglik: 1e-8,
            tol_score: 1e-4,
            max_halvings: 20,
            huge_se: 1000.0,
        }
    }
}

/// Outcome taxonomy; anything but `Converged` is discarded by calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FitStatus {
    Converged,
    GradientNonZero,
    SingularInfo,
    HugeSe,
}

impl fmt::Display for FitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitStatus::Converged => "converged",
            FitStatus::GradientNonZero => "gradient-nonzero",
            FitStatus::SingularInfo => "singular-information",
            FitStatus::HugeSe => "huge-se",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("endogenous column `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("conditional variance is not positive definite at the start values")]
    InvalidStart,
    #[error("information matrix singular at iteration {iteration} (condition estimate {condition:.3e})")]
    SingularInformation { iteration: usize, condition: f64 },
    #[error("data has {got} {what} columns, model expects {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Moments(#[from] MomentError),
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub table: ParameterTable,
    pub data: Dataset,
    pub theta_hat: DVector<f64>,
    pub loglik: f64,
    /// Expected information at θ̂.
    pub info: DMatrix<f64>,
    /// info⁻¹; NaN-filled when the information is singular.
    pub vcov: DMatrix<f64>,
    /// ξ = Y − μ(θ̂, X)
    pub residuals: DMatrix<f64>,
    pub bundle: MomentBundle,
    pub iterations: usize,
    pub status: FitStatus,
    pub max_abs_score: f64,
    /// Log-likelihood after each accepted iteration, starting value first.
    pub loglik_trace: Vec<f64>,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.status == FitStatus::Converged
    }

    pub fn se(&self) -> DVector<f64> {
        self.vcov.diagonal().map(f64::sqrt)
    }

    /// (n, m, l)
    pub fn data_dims(&self) -> (usize, usize, usize) {
        (self.data.n(), self.table.m(), self.table.l())
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Regresses `y` on an intercept plus the given X columns; returns the slopes.
fn ols_slopes(x: &DMatrix<f64>, cols: &[usize], y: &DVector<f64>) -> Option<DVector<f64>> {
    let n = y.len();
    let design = DMatrix::from_fn(n, cols.len() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, cols[j - 1])] });
    least_squares(&design, y).map(|b| b.rows(1, cols.len()).clone_owned())
}

/// Indicator used to anchor latent `s`: first fixed non-zero loading, else first loading.
fn anchor(table: &ParameterTable, s: usize) -> Option<(usize, f64)> {
    let g = table.grid(Matrix::Lambda);
    let fixed = (0..g.cols).find_map(|j| match g.get(s, j) {
        CellValue::Fixed(v) if v != 0.0 => Some((j, v)),
        _ => None,
    });
    fixed.or_else(|| (0..g.cols).find(|&j| matches!(g.get(s, j), CellValue::Param(_))).map(|j| (j, 1.0)))
}

/// Data-driven start values; the README describes the policy.
pub fn starting_values(table: &ParameterTable, data: &Dataset) -> Result<DVector<f64>, FitError> {
    check_dims(table, data)?;
    let (m, q, l) = (table.m(), table.q(), table.l());
    let x = &data.x;
    let mut stats = Vec::with_capacity(m);
    for j in 0..m {
        let col: Vec<f64> = data.y.column(j).iter().cloned().collect();
        let (mean, var) = mean_var(&col);
        if !(var > 1e-12 * (1.0 + mean * mean)) {
            return Err(FitError::ZeroVariance(table.endogenous[j].clone()));
        }
        stats.push((mean, var));
    }
    let mut wanted: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut push = |k: usize, v: f64| wanted.entry(k).or_default().push(v);

    let kg = table.grid(Matrix::Kappa);
    let mut kappa = table.fill(Matrix::Kappa, &table.start_values());
    for j in 0..m {
        let free: Vec<(usize, usize)> = (0..l)
            .filter_map(|r| match kg.get(r, j) {
                CellValue::Param(k) => Some((r, k)),
                _ => None,
            })
            .collect();
        if free.is_empty() {
            continue;
        }
        let mut y = data.y.column(j).clone_owned();
        for r in 0..l {
            if let CellValue::Fixed(v) = kg.get(r, j) {
                y -= x.column(r) * v;
            }
        }
        let cols: Vec<usize> = free.iter().map(|f| f.0).collect();
        if let Some(b) = ols_slopes(x, &cols, &y) {
            for (i, &(r, k)) in free.iter().enumerate() {
                push(k, b[i]);
                kappa[(r, j)] = b[i];
            }
        }
    }

    let gg = table.grid(Matrix::Gamma);
    let sz = table.grid(Matrix::SigmaZeta);
    let se = table.grid(Matrix::SigmaEps);
    for s in 0..q {
        let Some((j, lam)) = anchor(table, s) else { continue };
        let free: Vec<(usize, usize)> = (0..l)
            .filter_map(|r| match gg.get(r, s) {
                CellValue::Param(k) => Some((r, k)),
                _ => None,
            })
            .collect();
        if !free.is_empty() {
            let mut y = (data.y.column(j) - x * kappa.column(j)) / lam;
            for r in 0..l {
                if let CellValue::Fixed(v) = gg.get(r, s) {
                    y -= x.column(r) * v;
                }
            }
            let cols: Vec<usize> = free.iter().map(|f| f.0).collect();
            if let Some(b) = ols_slopes(x, &cols, &y) {
                for (i, &(_, k)) in free.iter().enumerate() {
                    push(k, b[i]);
                }
            }
        }
        if let CellValue::Param(k) = sz.get(s, s) {
            push(k, 0.5 * stats[j].1);
        }
    }
    for j in 0..m {
        if let CellValue::Param(k) = se.get(j, j) {
            push(k, 0.5 * stats[j].1);
        }
    }

    let mut theta = table.start_values();
    let apply = |theta: &mut DVector<f64>, wanted: &BTreeMap<usize, Vec<f64>>| {
        for (&k, v) in wanted {
            theta[k] = v.iter().sum::<f64>() / v.len() as f64;
        }
    };
    apply(&mut theta, &wanted);

    // Latent intercepts anchored on indicators whose intercept is fixed.
    let ag = table.grid(Matrix::Alpha);
    let ng = table.grid(Matrix::Nu);
    let mut alpha_wanted: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let base = conditional_moments(table, &theta, x, Order::First)?;
    for s in 0..q {
        let CellValue::Param(k) = ag.get(0, s) else { continue };
        let Some((j, lam)) = anchor(table, s) else { continue };
        if matches!(ng.get(0, j), CellValue::Fixed(_)) {
            let gap = stats[j].0 - base.mu.column(j).mean();
            alpha_wanted.entry(k).or_default().push(theta[k] + gap / lam);
        }
    }
    apply(&mut theta, &alpha_wanted);
    let base = conditional_moments(table, &theta, x, Order::First)?;
    let mut nu_wanted: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for j in 0..m {
        if let CellValue::Param(k) = ng.get(0, j) {
            let gap = stats[j].0 - base.mu.column(j).mean();
            nu_wanted.entry(k).or_default().push(theta[k] + gap);
        }
    }
    apply(&mut theta, &nu_wanted);
    Ok(theta)
}

fn check_dims(table: &ParameterTable, data: &Dataset) -> Result<(), FitError> {
    if data.y.ncols() != table.m() {
        return Err(FitError::Dimension {
            what: "endogenous",
            got: data.y.ncols(),
            expected: table.m(),
        });
    }
    if data.x.ncols() != table.l() {
        return Err(FitError::Dimension {
            what: "exogenous",
            got: data.x.ncols(),
            expected: table.l(),
        });
    }
    Ok(())
}

fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let ev = a.clone().symmetric_eigenvalues();
    let max = ev.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |acc: f64, v| acc.min(v.abs()));
    max / min
}

/// Fits the model from data-driven start values.
pub fn fit(table: &ParameterTable, data: &Dataset, options: &FitOptions) -> Result<FitResult, FitError> {
    let start = starting_values(table, data)?;
    fit_from(table, data, &start, options)
}

/// Largest change of a log-scale variance parameter per scoring step; larger
/// steps underflow variances heading to the boundary.
const MAX_LOG_STEP: f64 = 2.0;

/// Fisher scoring from `start`. Parameters bounded below by zero move on the
/// log scale; each step is halved until Ω stays positive definite and the
/// log-likelihood does not decrease.
pub fn fit_from(
    table: &ParameterTable,
    data: &Dataset,
    start: &DVector<f64>,
    options: &FitOptions,
) -> Result<FitResult, FitError> {
    check_dims(table, data)?;
    let p = table.p();
    let positive: Vec<bool> = table.params.iter().map(|p| p.lower.is_some()).collect();
    let mut theta = start.clone();
    let mut bundle = conditional_moments(table, &theta, &data.x, Order::First)?;
    if !bundle.valid || positive.iter().zip(theta.iter()).any(|(&pos, &v)| pos && v <= 0.0) {
        return Err(FitError::InvalidStart);
    }
    let mut ll = log_likelihood(&bundle, &data.y)?;
    let mut trace = vec![ll];
    let mut rel = f64::INFINITY;
    let mut iterations = 0;
    let mut s = score(&bundle, &data.y)?.total;
    let mut max_abs = s.amax();
    let mut status = FitStatus::GradientNonZero;
    loop {
        if max_abs < options.tol_score && rel < options.tol_loglik {
            status = FitStatus::Converged;
            break;
        }
        if iterations == options.max_iter {
            break;
        }
        let info = expected_information(&bundle, None)?;
        let scale = DVector::from_fn(p, |k, _| if positive[k] { theta[k] } else { 1.0 });
        let info_t = DMatrix::from_fn(p, p, |a, b| scale[a] * info[(a, b)] * scale[b]);
        let score_t = s.component_mul(&scale);
        let Some(chol) = info_t.clone().cholesky() else {
            return Err(FitError::SingularInformation {
                iteration: iterations,
                condition: condition_estimate(&info_t),
            });
        };
        let mut delta = chol.solve(&score_t);
        let log_max = (0..p).filter(|&k| positive[k]).map(|k| delta[k].abs()).fold(0.0, f64::max);
        if log_max > MAX_LOG_STEP {
            delta *= MAX_LOG_STEP / log_max;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let cand = DVector::from_fn(p, |k, _| {
                if positive[k] {
                    theta[k] * (step * delta[k]).exp()
                } else {
                    theta[k] + step * delta[k]
                }
            });
            if let Ok(b) = conditional_moments(table, &cand, &data.x, Order::First) {
                if b.valid {
                    let l_new = log_likelihood(&b, &data.y)?;
                    if l_new.is_finite() && l_new >= ll - 1e-12 * ll.abs().max(1.0) {
                        accepted = Some((cand, b, l_new));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((cand, b, l_new)) = accepted else {
            if max_abs < options.tol_score {
                status = FitStatus::Converged;
            }
            break;
        };
        iterations += 1;
        rel = (l_new - ll).abs() / ll.abs().max(1.0);
        theta = cand;
        bundle = b;
        ll = l_new;
        trace.push(ll);
        s = score(&bundle, &data.y)?.total;
        max_abs = s.amax();
    }

    let info = expected_information(&bundle, None)?;
    let vcov = match spd_inverse(&info) {
        Some(v) => v,
        None => {
            if status == FitStatus::Converged {
                status = FitStatus::SingularInfo;
            }
            DMatrix::from_element(p, p, f64::NAN)
        }
    };
    if status == FitStatus::Converged
        && vcov.diagonal().iter().any(|v| !(v.sqrt() <= options.huge_se))
    {
        status = FitStatus::HugeSe;
    }
    let residuals = bundle.residuals(&data.y);
    Ok(FitResult {
        table: table.clone(),
        data: data.clone(),
        theta_hat: theta,
        loglik: ll,
        info,
        vcov,
        residuals,
        bundle,
        iterations,
        status,
        max_abs_score: max_abs,
        loglik_trace: trace,
    })
}
