//! Conditional moments of Y given X and the likelihood quantities built on them.
//!
//! ```text
//! A = (I - B)⁻¹,  C = AΛ,  L = 1α + XΓ
//! μ = 1ν + L C + X K
//! Ω = Cᵀ Σ_ζ C + Σ_ε
//! ```

use crate::linalg::{frob_dot, spd_inverse_logdet, symmetrize, weighted_trace_prod};
use crate::model_spec::{Matrix, ParameterTable};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error("(I - B) is singular")]
    SingularStructural,
    #[error("conditional variance is not positive definite")]
    InvalidOmega,
    #[error("second derivatives were not computed for this bundle")]
    NoSecondDerivatives,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// How many derivative orders to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    First,
    Second,
}

/// Per-parameter pieces reused by second derivatives.
#[derive(Debug, Clone, Default)]
struct Partial {
    d_b: Option<DMatrix<f64>>,
    d_a: Option<DMatrix<f64>>,
    d_lambda: Option<DMatrix<f64>>,
    d_c: Option<DMatrix<f64>>,
    d_l: Option<DMatrix<f64>>,
    d_zeta: Option<DMatrix<f64>>,
}

/// μ, Ω and their derivatives at one θ.
#[derive(Debug, Clone)]
pub struct MomentBundle {
    pub theta: DVector<f64>,
    /// n×m, row i is μ(θ, X_i).
    pub mu: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    /// Zero when the bundle is invalid.
    pub omega_inv: DMatrix<f64>,
    /// NaN when the bundle is invalid.
    pub logdet_omega: f64,
    /// Ω positive definite.
    pub valid: bool,
    /// ∂μ/∂θ_k, each n×m.
    pub d_mu: Vec<DMatrix<f64>>,
    /// ∂Ω/∂θ_k, each m×m symmetric.
    pub d_omega: Vec<DMatrix<f64>>,
    /// Structural non-zero pattern of `d_mu`.
    pub mean_active: Vec<bool>,
    /// Structural non-zero pattern of `d_omega`.
    pub var_active: Vec<bool>,
    d2_mu: Option<BTreeMap<(usize, usize), DMatrix<f64>>>,
    d2_omega: Option<BTreeMap<(usize, usize), DMatrix<f64>>>,
}

fn key(k: usize, l: usize) -> (usize, usize) {
    (k.min(l), k.max(l))
}

fn add_opt(acc: &mut Option<DMatrix<f64>>, v: DMatrix<f64>) {
    match acc {
        Some(a) => *a += v,
        None => *acc = Some(v),
    }
}

/// Evaluates μ(θ, X), Ω(θ) and derivatives up to `order`.
pub fn conditional_moments(
    table: &ParameterTable,
    theta: &DVector<f64>,
    x: &DMatrix<f64>,
    order: Order,
) -> Result<MomentBundle, MomentError> {
    let (m, q, l, p) = (table.m(), table.q(), table.l(), table.p());
    let n = x.nrows();
    if theta.len() != p {
        return Err(MomentError::Dimension(format!("θ has {} entries, expected {p}", theta.len())));
    }
    if x.ncols() != l {
        return Err(MomentError::Dimension(format!("X has {} columns, expected {l}", x.ncols())));
    }
    let nu = table.fill(Matrix::Nu, theta);
    let alpha = table.fill(Matrix::Alpha, theta);
    let lambda = table.fill(Matrix::Lambda, theta);
    let kappa = table.fill(Matrix::Kappa, theta);
    let gamma = table.fill(Matrix::Gamma, theta);
    let beta = table.fill(Matrix::Beta, theta);
    let sig_e = table.fill(Matrix::SigmaEps, theta);
    let sig_z = table.fill(Matrix::SigmaZeta, theta);

    let a = if q == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let ib = DMatrix::identity(q, q) - &beta;
        let lu = ib.lu();
        let det = lu.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(MomentError::SingularStructural);
        }
        lu.try_inverse().ok_or(MomentError::SingularStructural)?
    };
    let c = &a * &lambda;
    let ones = DMatrix::from_element(n, 1, 1.0);
    let lat = &ones * &alpha + x * &gamma;
    let mu = &ones * &nu + &lat * &c + x * &kappa;
    let mut omega = c.transpose() * &sig_z * &c + &sig_e;
    symmetrize(&mut omega);
    let (omega_inv, logdet, valid) = match spd_inverse_logdet(&omega) {
        Some((inv, ld)) => (inv, ld, true),
        None => (DMatrix::zeros(m, m), f64::NAN, false),
    };

    let mut d_mu = Vec::with_capacity(p);
    let mut d_omega = Vec::with_capacity(p);
    let mut mean_active = vec![false; p];
    let mut var_active = vec![false; p];
    let mut partials = Vec::with_capacity(p);
    for k in 0..p {
        let mut part = Partial::default();
        let mut dmu = DMatrix::zeros(n, m);
        let mut dom = DMatrix::zeros(m, m);
        let mut d_lat: Option<DMatrix<f64>> = None;
        let mut d_sig_e: Option<DMatrix<f64>> = None;
        let mut d_kappa_or_nu = false;
        for cell in &table.params[k].cells {
            let (r, s) = (cell.row, cell.col);
            match cell.matrix {
                Matrix::Nu => {
                    d_kappa_or_nu = true;
                    dmu.column_mut(s).add_scalar_mut(1.0);
                }
                Matrix::Kappa => {
                    d_kappa_or_nu = true;
                    let col = x.column(r).clone_owned();
                    let mut target = dmu.column_mut(s);
                    target += col;
                }
                Matrix::Alpha => {
                    let dl = d_lat.get_or_insert_with(|| DMatrix::zeros(n, q));
                    dl.column_mut(s).add_scalar_mut(1.0);
                }
                Matrix::Gamma => {
                    let dl = d_lat.get_or_insert_with(|| DMatrix::zeros(n, q));
                    let col = x.column(r).clone_owned();
                    let mut target = dl.column_mut(s);
                    target += col;
                }
                Matrix::Lambda => {
                    part.d_lambda.get_or_insert_with(|| DMatrix::zeros(q, m))[(r, s)] += 1.0;
                }
                Matrix::Beta => {
                    part.d_b.get_or_insert_with(|| DMatrix::zeros(q, q))[(r, s)] += 1.0;
                }
                Matrix::SigmaEps => {
                    d_sig_e.get_or_insert_with(|| DMatrix::zeros(m, m))[(r, s)] += 1.0;
                }
                Matrix::SigmaZeta => {
                    part.d_zeta.get_or_insert_with(|| DMatrix::zeros(q, q))[(r, s)] += 1.0;
                }
            }
        }
        if let Some(db) = &part.d_b {
            let da = &a * db * &a;
            add_opt(&mut part.d_c, &da * &lambda);
            part.d_a = Some(da);
        }
        if let Some(dlam) = &part.d_lambda {
            add_opt(&mut part.d_c, &a * dlam);
        }
        if let Some(dl) = &d_lat {
            dmu += dl * &c;
        }
        if let Some(dc) = &part.d_c {
            dmu += &lat * dc;
            let t = c.transpose() * &sig_z * dc;
            dom += &t + t.transpose();
        }
        if let Some(dz) = &part.d_zeta {
            dom += c.transpose() * dz * &c;
        }
        if let Some(de) = &d_sig_e {
            dom += de;
        }
        mean_active[k] = d_kappa_or_nu || d_lat.is_some() || part.d_c.is_some();
        var_active[k] = part.d_c.is_some() || part.d_zeta.is_some() || d_sig_e.is_some();
        part.d_l = d_lat;
        d_mu.push(dmu);
        d_omega.push(dom);
        partials.push(part);
    }

    let (d2_mu, d2_omega) = if order == Order::Second {
        let mut d2m = BTreeMap::new();
        let mut d2o = BTreeMap::new();
        for k in 0..p {
            for j in k..p {
                let (pk, pj) = (&partials[k], &partials[j]);
                let mut d2c: Option<DMatrix<f64>> = None;
                if let (Some(dak), Some(daj), Some(dbk), Some(dbj)) = (&pk.d_a, &pj.d_a, &pk.d_b, &pj.d_b) {
                    let d2a = daj * dbk * &a + dak * dbj * &a;
                    add_opt(&mut d2c, d2a * &lambda);
                }
                if let (Some(dak), Some(dlj)) = (&pk.d_a, &pj.d_lambda) {
                    add_opt(&mut d2c, dak * dlj);
                }
                if let (Some(daj), Some(dlk)) = (&pj.d_a, &pk.d_lambda) {
                    add_opt(&mut d2c, daj * dlk);
                }
                let mut d2mu: Option<DMatrix<f64>> = None;
                if let (Some(dlk), Some(dcj)) = (&pk.d_l, &pj.d_c) {
                    add_opt(&mut d2mu, dlk * dcj);
                }
                if let (Some(dlj), Some(dck)) = (&pj.d_l, &pk.d_c) {
                    add_opt(&mut d2mu, dlj * dck);
                }
                let mut d2om: Option<DMatrix<f64>> = None;
                if let Some(d2c) = &d2c {
                    add_opt(&mut d2mu, &lat * d2c);
                    let t = c.transpose() * &sig_z * d2c;
                    add_opt(&mut d2om, &t + t.transpose());
                }
                if let (Some(dck), Some(dcj)) = (&pk.d_c, &pj.d_c) {
                    let u = dck.transpose() * &sig_z * dcj;
                    add_opt(&mut d2om, &u + u.transpose());
                }
                if let (Some(dck), Some(dzj)) = (&pk.d_c, &pj.d_zeta) {
                    let v = dck.transpose() * dzj * &c;
                    add_opt(&mut d2om, &v + v.transpose());
                }
                if let (Some(dcj), Some(dzk)) = (&pj.d_c, &pk.d_zeta) {
                    let w = dcj.transpose() * dzk * &c;
                    add_opt(&mut d2om, &w + w.transpose());
                }
                if let Some(v) = d2mu {
                    d2m.insert((k, j), v);
                }
                if let Some(v) = d2om {
                    d2o.insert((k, j), v);
                }
            }
        }
        (Some(d2m), Some(d2o))
    } else {
        (None, None)
    };

    Ok(MomentBundle {
        theta: theta.clone(),
        mu,
        omega,
        omega_inv,
        logdet_omega: logdet,
        valid,
        d_mu,
        d_omega,
        mean_active,
        var_active,
        d2_mu,
        d2_omega,
    })
}

impl MomentBundle {
    pub fn n(&self) -> usize {
        self.mu.nrows()
    }

    pub fn m(&self) -> usize {
        self.mu.ncols()
    }

    pub fn p(&self) -> usize {
        self.theta.len()
    }

    pub fn has_second(&self) -> bool {
        self.d2_mu.is_some()
    }

    /// ∂²μ/∂θ_k∂θ_l, `None` when structurally zero.
    pub fn d2_mu(&self, k: usize, l: usize) -> Result<Option<&DMatrix<f64>>, MomentError> {
        let map = self.d2_mu.as_ref().ok_or(MomentError::NoSecondDerivatives)?;
        Ok(map.get(&key(k, l)))
    }

    /// ∂²Ω/∂θ_k∂θ_l, `None` when structurally zero.
    pub fn d2_omega(&self, k: usize, l: usize) -> Result<Option<&DMatrix<f64>>, MomentError> {
        let map = self.d2_omega.as_ref().ok_or(MomentError::NoSecondDerivatives)?;
        Ok(map.get(&key(k, l)))
    }

    /// ξ = Y − μ
    pub fn residuals(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        y - &self.mu
    }

    fn check(&self, y: Option<&DMatrix<f64>>) -> Result<(), MomentError> {
        if !self.valid {
            return Err(MomentError::InvalidOmega);
        }
        if let Some(y) = y {
            if y.shape() != self.mu.shape() {
                return Err(MomentError::Dimension(format!(
                    "Y is {}×{}, expected {}×{}",
                    y.nrows(),
                    y.ncols(),
                    self.n(),
                    self.m()
                )));
            }
        }
        Ok(())
    }

    fn default_weights(&self, n_eff: Option<&DVector<f64>>) -> Result<DVector<f64>, MomentError> {
        match n_eff {
            Some(w) if w.len() != self.m() => Err(MomentError::Dimension(format!(
                "n_eff has {} entries, expected {}",
                w.len(),
                self.m()
            ))),
            Some(w) => Ok(w.clone()),
            None => Ok(DVector::from_element(self.m(), self.n() as f64)),
        }
    }

    /// Ω⁻¹ ∂Ω/∂θ_k for variance-active k.
    fn p_mats(&self) -> Vec<Option<DMatrix<f64>>> {
        (0..self.p())
            .map(|k| self.var_active[k].then(|| &self.omega_inv * &self.d_omega[k]))
            .collect()
    }
}

/// Σ_i [−(m/2) log 2π − ½ log|Ω| − ½ ξ_i Ω⁻¹ ξ_iᵀ]
pub fn log_likelihood(bundle: &MomentBundle, y: &DMatrix<f64>) -> Result<f64, MomentError> {
    bundle.check(Some(y))?;
    let xi = bundle.residuals(y);
    let r = &xi * &bundle.omega_inv;
    let quad = frob_dot(&r, &xi);
    let (n, m) = (bundle.n() as f64, bundle.m() as f64);
    Ok(-0.5 * n * m * (2.0 * PI).ln() - 0.5 * n * bundle.logdet_omega - 0.5 * quad)
}

/// Individual (n×p) and total scores.
#[derive(Debug, Clone)]
pub struct Scores {
    pub individual: DMatrix<f64>,
    pub total: DVector<f64>,
}

pub fn score(bundle: &MomentBundle, y: &DMatrix<f64>) -> Result<Scores, MomentError> {
    bundle.check(Some(y))?;
    let xi = bundle.residuals(y);
    let r = &xi * &bundle.omega_inv;
    let (n, p) = (bundle.n(), bundle.p());
    let mut ind = DMatrix::zeros(n, p);
    for k in 0..p {
        let mut col = DVector::zeros(n);
        if bundle.var_active[k] {
            let tr = (&bundle.omega_inv * &bundle.d_omega[k]).trace();
            let rd = &r * &bundle.d_omega[k];
            for i in 0..n {
                col[i] = -0.5 * tr + 0.5 * rd.row(i).dot(&r.row(i));
            }
        }
        if bundle.mean_active[k] {
            let dm = &bundle.d_mu[k];
            for i in 0..n {
                col[i] += dm.row(i).dot(&r.row(i));
            }
        }
        ind.set_column(k, &col);
    }
    let total = DVector::from_iterator(p, ind.column_iter().map(|c| c.sum()));
    Ok(Scores {
        individual: ind,
        total,
    })
}

/// Observed Hessian of the log-likelihood; needs second derivatives.
pub fn hessian(bundle: &MomentBundle, y: &DMatrix<f64>) -> Result<DMatrix<f64>, MomentError> {
    bundle.check(Some(y))?;
    if !bundle.has_second() {
        return Err(MomentError::NoSecondDerivatives);
    }
    let (n, p) = (bundle.n() as f64, bundle.p());
    let oi = &bundle.omega_inv;
    let xi = bundle.residuals(y);
    let r = &xi * oi;
    let pm = bundle.p_mats();
    let rd: Vec<Option<DMatrix<f64>>> = (0..p)
        .map(|k| bundle.var_active[k].then(|| &r * &bundle.d_omega[k]))
        .collect();
    let rdo: Vec<Option<DMatrix<f64>>> = rd.iter().map(|m| m.as_ref().map(|m| m * oi)).collect();
    let u: Vec<Option<DMatrix<f64>>> = (0..p)
        .map(|k| bundle.mean_active[k].then(|| &bundle.d_mu[k] * oi))
        .collect();
    let mut h = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let mut v = 0.0;
            if let (Some(pa), Some(pb)) = (&pm[a], &pm[b]) {
                v += 0.5 * n * (pb * pa).trace();
                v -= frob_dot(rdo[b].as_ref().unwrap(), rd[a].as_ref().unwrap());
            }
            if let Some(d2o) = bundle.d2_omega(a, b)? {
                v -= 0.5 * n * (oi * d2o).trace();
                v += 0.5 * frob_dot(&(&r * d2o), &r);
            }
            if let Some(d2m) = bundle.d2_mu(a, b)? {
                v += frob_dot(d2m, &r);
            }
            if let (Some(_), Some(ub)) = (&u[a], &u[b]) {
                v -= frob_dot(&bundle.d_mu[a], ub);
            }
            if let (Some(_), Some(rdob)) = (&u[a], &rdo[b]) {
                v -= frob_dot(&bundle.d_mu[a], rdob);
            }
            if let (Some(_), Some(rdoa)) = (&u[b], &rdo[a]) {
                v -= frob_dot(&bundle.d_mu[b], rdoa);
            }
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    Ok(h)
}

/// Expected information. With `n_eff` the trace term uses the weighted trace
/// Σ_t n_t (·)_tt, symmetrized over the two parameter orders; without it every
/// weight is n.
pub fn expected_information(
    bundle: &MomentBundle,
    n_eff: Option<&DVector<f64>>,
) -> Result<DMatrix<f64>, MomentError> {
    bundle.check(None)?;
    let w = bundle.default_weights(n_eff)?;
    let p = bundle.p();
    let pm = bundle.p_mats();
    let u: Vec<Option<DMatrix<f64>>> = (0..p)
        .map(|k| bundle.mean_active[k].then(|| &bundle.d_mu[k] * &bundle.omega_inv))
        .collect();
    let mut info = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let mut v = 0.0;
            if let (Some(pa), Some(pb)) = (&pm[a], &pm[b]) {
                v += 0.25 * (weighted_trace_prod(&w, pa, pb) + weighted_trace_prod(&w, pb, pa));
            }
            if let (true, Some(ub)) = (bundle.mean_active[a], &u[b]) {
                v += frob_dot(&bundle.d_mu[a], ub);
            }
            info[(a, b)] = v;
            info[(b, a)] = v;
        }
    }
    Ok(info)
}

/// ∂I/∂θ_c for every c, with `n_eff` held constant. Entry c of the result is
/// the p×p matrix ∂I/∂θ_c.
pub fn d_information(
    bundle: &MomentBundle,
    n_eff: Option<&DVector<f64>>,
) -> Result<Vec<DMatrix<f64>>, MomentError> {
    bundle.check(None)?;
    if !bundle.has_second() {
        return Err(MomentError::NoSecondDerivatives);
    }
    let w = bundle.default_weights(n_eff)?;
    let (p, m) = (bundle.p(), bundle.m());
    let oi = &bundle.omega_inv;
    let pm = bundle.p_mats();
    let var: Vec<usize> = (0..p).filter(|&k| bundle.var_active[k]).collect();
    let mean: Vec<usize> = (0..p).filter(|&k| bundle.mean_active[k]).collect();
    let u: Vec<Option<DMatrix<f64>>> = (0..p)
        .map(|k| bundle.mean_active[k].then(|| &bundle.d_mu[k] * oi))
        .collect();

    // cross[s][t][(ia, ib)] = Σ_i U_a[i,s] U_b[i,t] over mean-active a, b.
    let n = bundle.n();
    let stacked: Vec<DMatrix<f64>> = (0..m)
        .map(|s| {
            DMatrix::from_fn(n, mean.len(), |i, ia| u[mean[ia]].as_ref().unwrap()[(i, s)])
        })
        .collect();
    let cross: Vec<Vec<DMatrix<f64>>> = if var.is_empty() {
        Vec::new()
    } else {
        (0..m)
            .map(|s| (0..m).map(|t| stacked[s].transpose() * &stacked[t]).collect())
            .collect()
    };

    let mut out = vec![DMatrix::zeros(p, p); p];
    for c in 0..p {
        let dic = &mut out[c];
        if let Some(pc) = &pm[c] {
            let q_c: Vec<Option<DMatrix<f64>>> = (0..p)
                .map(|a| bundle.d2_omega(a, c).ok().flatten().map(|d| oi * d))
                .collect();
            let x: Vec<Option<DMatrix<f64>>> = (0..p)
                .map(|a| {
                    pm[a].as_ref().map(|pa| {
                        let mut xa = -(pc * pa) - pa * pc;
                        if let Some(qa) = &q_c[a] {
                            xa += qa;
                        }
                        xa
                    })
                })
                .collect();
            for (ia, &a) in var.iter().enumerate() {
                for &b in &var[ia..] {
                    let (pa, pb) = (pm[a].as_ref().unwrap(), pm[b].as_ref().unwrap());
                    let (xa, xb) = (x[a].as_ref().unwrap(), x[b].as_ref().unwrap());
                    let mut v = weighted_trace_prod(&w, xa, pb) + weighted_trace_prod(&w, xb, pa);
                    if let Some(qb) = &q_c[b] {
                        v += weighted_trace_prod(&w, pa, qb);
                    }
                    if let Some(qa) = &q_c[a] {
                        v += weighted_trace_prod(&w, pb, qa);
                    }
                    dic[(a, b)] += 0.25 * v;
                    if a != b {
                        dic[(b, a)] += 0.25 * v;
                    }
                }
            }
            let dc = &bundle.d_omega[c];
            for (ia, &a) in mean.iter().enumerate() {
                for (ib, &b) in mean.iter().enumerate() {
                    let mut v = 0.0;
                    for s in 0..m {
                        for t in 0..m {
                            if dc[(s, t)] != 0.0 {
                                v += dc[(s, t)] * cross[s][t][(ia, ib)];
                            }
                        }
                    }
                    dic[(a, b)] -= v;
                }
            }
        }
        for &a in &mean {
            if let Some(d2m) = bundle.d2_mu(a, c)? {
                let y = d2m * oi;
                for &b in &mean {
                    let r = frob_dot(&y, &bundle.d_mu[b]);
                    dic[(a, b)] += r;
                    dic[(b, a)] += r;
                }
            }
        }
    }
    Ok(out)
}
