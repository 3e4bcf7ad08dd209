//! Wald and F tests with Satterthwaite degrees of freedom, optional bias and
//! effective-sample-size corrections, and cluster-robust variance.

use crate::correction::{algorithm1, algorithm2, CorrectedFit, CorrectionError, CorrectionOptions};
use crate::data::Dataset;
use crate::dist::{f_sf, t_two_sided, DistError};
use crate::estimation::FitResult;
use crate::model_spec::ParameterTable;
use crate::moments::{conditional_moments, d_information, score, MomentBundle, MomentError, Order};
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Inference flavour.
///
/// | mode            | variance        | df                       |
/// |-----------------|-----------------|--------------------------|
/// | `None`          | ML              | ∞                        |
/// | `Bias`          | Algorithm 1     | ∞                        |
/// | `Satterthwaite` | ML              | Satterthwaite            |
/// | `Full`          | Algorithm 1     | Satterthwaite            |
/// | `FullWithNeff`  | Algorithm 2     | Satterthwaite (weighted) |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Correction {
    None,
    Bias,
    Satterthwaite,
    Full,
    FullWithNeff,
}

impl Correction {
    pub const ALL: [Correction; 5] = [
        Correction::None,
        Correction::Bias,
        Correction::Satterthwaite,
        Correction::Full,
        Correction::FullWithNeff,
    ];

    pub fn uses_satterthwaite(self) -> bool {
        matches!(self, Correction::Satterthwaite | Correction::Full | Correction::FullWithNeff)
    }

    pub fn name(self) -> &'static str {
        match self {
            Correction::None => "none",
            Correction::Bias => "bias",
            Correction::Satterthwaite => "satterthwaite",
            Correction::Full => "full",
            Correction::FullWithNeff => "full-neff",
        }
    }
}

impl fmt::Display for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Correction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Correction::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown correction `{s}` (expected none, bias, satterthwaite, full or full-neff)"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("contrast has zero variance or variance matrix is not positive definite")]
    NonPositiveVariance,
    #[error("contrast is the zero vector")]
    ZeroContrast,
    #[error("contrast matrix is rank deficient")]
    RankDeficient,
    #[error("degrees of freedom {nu} of contrast {index} do not exceed 2")]
    DfTooSmall { index: usize, nu: f64 },
    #[error("need at least two clusters, got {0}")]
    TooFewClusters(usize),
    #[error("cluster assignment has {got} entries, data has {expected} rows")]
    ClusterLength { got: usize, expected: usize },
    #[error("contrast: {0}")]
    Contrast(String),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error(transparent)]
    Moments(#[from] MomentError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Anything Wald tests can run on: a raw fit or a corrected one.
pub trait InferenceSource {
    fn table(&self) -> &ParameterTable;
    fn theta(&self) -> &DVector<f64>;
    fn vcov(&self) -> &DMatrix<f64>;
    fn bundle(&self) -> &MomentBundle;
    fn data(&self) -> &Dataset;
    /// Weights of the information's trace term; `None` means n.
    fn n_eff(&self) -> Option<&DVector<f64>>;
    /// Leverage-corrected residuals; the robust meat uses them when present.
    fn corrected_residuals(&self) -> Option<&DMatrix<f64>> {
        None
    }
}

impl InferenceSource for FitResult {
    fn table(&self) -> &ParameterTable {
        &self.table
    }
    fn theta(&self) -> &DVector<f64> {
        &self.theta_hat
    }
    fn vcov(&self) -> &DMatrix<f64> {
        &self.vcov
    }
    fn bundle(&self) -> &MomentBundle {
        &self.bundle
    }
    fn data(&self) -> &Dataset {
        &self.data
    }
    fn n_eff(&self) -> Option<&DVector<f64>> {
        None
    }
}

impl InferenceSource for CorrectedFit {
    fn table(&self) -> &ParameterTable {
        &self.base.table
    }
    fn theta(&self) -> &DVector<f64> {
        &self.theta_c
    }
    fn vcov(&self) -> &DMatrix<f64> {
        &self.vcov_c
    }
    fn bundle(&self) -> &MomentBundle {
        &self.bundle_c
    }
    fn data(&self) -> &Dataset {
        &self.base.data
    }
    fn n_eff(&self) -> Option<&DVector<f64>> {
        Some(&self.n_eff)
    }
    fn corrected_residuals(&self) -> Option<&DMatrix<f64>> {
        self.xi_c.as_ref()
    }
}

/// Partition of observations into clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIndex {
    /// Dense cluster id per observation, numbered by first appearance.
    pub assignment: Vec<usize>,
    pub g: usize,
}

impl ClusterIndex {
    pub fn new<T: Eq + std::hash::Hash + Clone>(ids: &[T]) -> Self {
        let mut map: HashMap<T, usize> = HashMap::new();
        let assignment = ids
            .iter()
            .map(|id| {
                let next = map.len();
                *map.entry(id.clone()).or_insert(next)
            })
            .collect();
        ClusterIndex {
            assignment,
            g: map.len(),
        }
    }

    /// Every observation its own cluster.
    pub fn singletons(n: usize) -> Self {
        ClusterIndex {
            assignment: (0..n).collect(),
            g: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaldResult {
    pub contrast: DVector<f64>,
    pub null_value: f64,
    pub estimate: f64,
    pub se: f64,
    pub statistic: f64,
    /// `f64::INFINITY` for the asymptotic test.
    pub df: f64,
    pub p_value: f64,
    pub correction: Correction,
    pub robust: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FTestResult {
    pub contrasts: DMatrix<f64>,
    pub null_values: DVector<f64>,
    pub q: usize,
    pub statistic: f64,
    pub df1: f64,
    pub df2: f64,
    pub per_contrast_df: Vec<f64>,
    pub eigvals: Vec<f64>,
    pub p_value: f64,
    pub correction: Correction,
    pub robust: bool,
}

/// I⁻¹ (Σ_g S_gᵀ S_g) I⁻¹ with scores evaluated at the source's θ.
pub fn robust_vcov(source: &dyn InferenceSource, clusters: &ClusterIndex) -> Result<DMatrix<f64>, InferenceError> {
    let n = source.data().n();
    if clusters.assignment.len() != n {
        return Err(InferenceError::ClusterLength {
            got: clusters.assignment.len(),
            expected: n,
        });
    }
    if clusters.g < 2 {
        return Err(InferenceError::TooFewClusters(clusters.g));
    }
    let s = match source.corrected_residuals() {
        Some(xi) => score(source.bundle(), &(&source.bundle().mu + xi))?.individual,
        None => score(source.bundle(), &source.data().y)?.individual,
    };
    let p = s.ncols();
    let mut sums = DMatrix::zeros(clusters.g, p);
    for (i, &g) in clusters.assignment.iter().enumerate() {
        let mut row = sums.row_mut(g);
        row += s.row(i);
    }
    let meat = sums.transpose() * &sums;
    let v = source.vcov();
    let mut out = v * meat * v;
    crate::linalg::symmetrize(&mut out);
    Ok(out)
}

/// ∂I/∂θ_k at the source's θ, holding any effective sample sizes fixed.
pub fn information_derivative(source: &dyn InferenceSource) -> Result<Vec<DMatrix<f64>>, InferenceError> {
    let b2 = conditional_moments(source.table(), source.theta(), &source.data().x, Order::Second)?;
    Ok(d_information(&b2, source.n_eff())?)
}

/// df = 2 (cΣcᵀ)² / (g Σ gᵀ) with g_k = −c Σ (∂I/∂θ_k) Σ cᵀ; ∞ when g = 0.
pub fn satterthwaite_from(d_info: &[DMatrix<f64>], vcov: &DMatrix<f64>, c: &DVector<f64>) -> f64 {
    let nonzero: Vec<(usize, &DMatrix<f64>)> = d_info.iter().enumerate().collect();
    satterthwaite_nonzero(&nonzero, vcov, c)
}

/// Same as [`satterthwaite_from`] over the nonzero ∂I/∂θ_k only.
fn satterthwaite_nonzero(d_info: &[(usize, &DMatrix<f64>)], vcov: &DMatrix<f64>, c: &DVector<f64>) -> f64 {
    let sc = vcov * c;
    let var = c.dot(&sc);
    let mut g = DVector::zeros(vcov.nrows());
    for &(k, d) in d_info {
        g[k] = -sc.dot(&(d * &sc));
    }
    let denom = g.dot(&(vcov * &g));
    if denom == 0.0 {
        return f64::INFINITY;
    }
    2.0 * var * var / denom
}

pub fn satterthwaite_df(source: &dyn InferenceSource, c: &DVector<f64>) -> Result<f64, InferenceError> {
    let d = information_derivative(source)?;
    Ok(satterthwaite_from(&d, source.vcov(), c))
}

/// Precomputed pieces for repeated tests against one fit.
pub struct InferenceContext<'a> {
    source: &'a dyn InferenceSource,
    correction: Correction,
    d_info: Option<Vec<DMatrix<f64>>>,
    nonzero_d_info: Vec<bool>,
    robust: Option<DMatrix<f64>>,
}

impl<'a> InferenceContext<'a> {
    pub fn new(
        source: &'a dyn InferenceSource,
        correction: Correction,
        clusters: Option<&ClusterIndex>,
    ) -> Result<Self, InferenceError> {
        let d_info = if correction.uses_satterthwaite() {
            Some(information_derivative(source)?)
        } else {
            None
        };
        let robust = clusters.map(|c| robust_vcov(source, c)).transpose()?;
        let nonzero_d_info = d_info
            .iter()
            .flatten()
            .map(|d| d.iter().any(|v| *v != 0.0))
            .collect();
        Ok(InferenceContext {
            source,
            correction,
            d_info,
            nonzero_d_info,
            robust,
        })
    }

    fn df(&self, c: &DVector<f64>) -> f64 {
        match &self.d_info {
            // Pure-mean parameters leave I unchanged; skipping them saves a p² product each.
            Some(d) => {
                let nonzero: Vec<(usize, &DMatrix<f64>)> =
                    d.iter().enumerate().filter(|(k, _)| self.nonzero_d_info[*k]).collect();
                satterthwaite_nonzero(&nonzero, self.source.vcov(), c)
            }
            None => f64::INFINITY,
        }
    }

    fn test_vcov(&self) -> &DMatrix<f64> {
        self.robust.as_ref().unwrap_or(self.source.vcov())
    }

    pub fn wald(&self, c: &DVector<f64>, null_value: f64) -> Result<WaldResult, InferenceError> {
        if c.iter().all(|v| *v == 0.0) {
            return Err(InferenceError::ZeroContrast);
        }
        // Statistic, df and p are computed on the unit-norm contrast so that
        // rescaling c only perturbs them at the level of one rounding of c.
        let norm = c.norm();
        let u = c / norm;
        let var_u = u.dot(&(self.test_vcov() * &u));
        if !(var_u > 0.0) {
            return Err(InferenceError::NonPositiveVariance);
        }
        let se_u = var_u.sqrt();
        let statistic = (u.dot(self.source.theta()) - null_value / norm) / se_u;
        let df = self.df(&u);
        let estimate = c.dot(self.source.theta());
        let se = se_u * norm;
        let p_value = t_two_sided(statistic, df)?;
        Ok(WaldResult {
            contrast: c.clone(),
            null_value,
            estimate,
            se,
            statistic,
            df,
            p_value,
            correction: self.correction,
            robust: self.robust.is_some(),
        })
    }

    pub fn f_test(&self, cm: &DMatrix<f64>, null_values: &DVector<f64>) -> Result<FTestResult, InferenceError> {
        let q = cm.nrows();
        let model_v = cm * self.source.vcov() * cm.transpose();
        let eig = model_v.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        if q == 0 || eig.eigenvalues.iter().any(|&k| !(k > 1e-12 * max)) {
            return Err(InferenceError::RankDeficient);
        }
        let test_v = cm * self.test_vcov() * cm.transpose();
        let inv = crate::linalg::spd_inverse(&test_v).ok_or(InferenceError::NonPositiveVariance)?;
        let diff = cm * self.source.theta() - null_values;
        let statistic = diff.dot(&(&inv * &diff)) / q as f64;
        let mut per = Vec::with_capacity(q);
        for j in 0..q {
            let v = eig.eigenvectors.column(j);
            let row = (cm.transpose() * v) / eig.eigenvalues[j].sqrt();
            per.push(self.df(&row));
        }
        let df2 = if self.d_info.is_none() {
            f64::INFINITY
        } else if q == 1 {
            per[0]
        } else {
            let mut sum = 0.0;
            for (j, &nu) in per.iter().enumerate() {
                if !(nu > 2.0) {
                    return Err(InferenceError::DfTooSmall { index: j, nu });
                }
                sum += if nu.is_infinite() { 1.0 } else { nu / (nu - 2.0) };
            }
            if sum - q as f64 <= 0.0 {
                f64::INFINITY
            } else {
                2.0 * sum / (sum - q as f64)
            }
        };
        let p_value = f_sf(statistic, q as f64, df2)?;
        Ok(FTestResult {
            contrasts: cm.clone(),
            null_values: null_values.clone(),
            q,
            statistic,
            df1: q as f64,
            df2,
            per_contrast_df: per,
            eigvals: eig.eigenvalues.iter().cloned().collect(),
            p_value,
            correction: self.correction,
            robust: self.robust.is_some(),
        })
    }
}

/// A fit prepared for a correction mode.
pub enum Prepared<'a> {
    Raw(&'a FitResult),
    Corrected(Box<CorrectedFit>),
}

impl Prepared<'_> {
    pub fn source(&self) -> &dyn InferenceSource {
        match self {
            Prepared::Raw(f) => *f,
            Prepared::Corrected(c) => c.as_ref(),
        }
    }

    pub fn corrected(&self) -> Option<&CorrectedFit> {
        match self {
            Prepared::Raw(_) => None,
            Prepared::Corrected(c) => Some(c),
        }
    }
}

/// Runs whichever correction algorithm `correction` needs.
pub fn prepare<'a>(
    fit: &'a FitResult,
    correction: Correction,
    options: &CorrectionOptions,
) -> Result<Prepared<'a>, InferenceError> {
    Ok(match correction {
        Correction::None | Correction::Satterthwaite => Prepared::Raw(fit),
        Correction::Bias | Correction::Full => Prepared::Corrected(Box::new(algorithm1(fit, options)?)),
        Correction::FullWithNeff => Prepared::Corrected(Box::new(algorithm2(fit, options)?)),
    })
}

/// One-shot Wald test.
pub fn wald_test(
    source: &dyn InferenceSource,
    c: &DVector<f64>,
    null_value: f64,
    correction: Correction,
    clusters: Option<&ClusterIndex>,
) -> Result<WaldResult, InferenceError> {
    InferenceContext::new(source, correction, clusters)?.wald(c, null_value)
}

/// One-shot F test of C θ = r.
pub fn f_test(
    source: &dyn InferenceSource,
    cm: &DMatrix<f64>,
    null_values: &DVector<f64>,
    correction: Correction,
    clusters: Option<&ClusterIndex>,
) -> Result<FTestResult, InferenceError> {
    InferenceContext::new(source, correction, clusters)?.f_test(cm, null_values)
}

/// Parses `lhs = rhs` equations separated by commas, where each side is a
/// linear combination like `2*a - b + 0.5` over parameter labels. Returns the
/// contrast matrix C and null values r of C θ = r.
pub fn parse_contrasts(table: &ParameterTable, expr: &str) -> Result<(DMatrix<f64>, DVector<f64>), InferenceError> {
    let eqs: Vec<&str> = expr.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if eqs.is_empty() {
        return Err(InferenceError::Contrast("empty contrast expression".into()));
    }
    let p = table.p();
    let mut cm = DMatrix::zeros(eqs.len(), p);
    let mut r = DVector::zeros(eqs.len());
    for (row, eq) in eqs.iter().enumerate() {
        let (lhs, rhs) = match eq.split_once('=') {
            Some((a, b)) => (a, b),
            None => (*eq, "0"),
        };
        let (cl, kl) = linear_combination(table, lhs)?;
        let (cr, kr) = linear_combination(table, rhs)?;
        let coef = cl - cr;
        if coef.iter().all(|v| *v == 0.0) {
            return Err(InferenceError::Contrast(format!("`{eq}` involves no parameter")));
        }
        cm.set_row(row, &coef.transpose());
        r[row] = kr - kl;
    }
    Ok((cm, r))
}

fn linear_combination(table: &ParameterTable, s: &str) -> Result<(DVector<f64>, f64), InferenceError> {
    let mut coef = DVector::zeros(table.p());
    let mut constant = 0.0;
    let chars: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
    let bad = |msg: &str| InferenceError::Contrast(format!("{msg} in `{}`", s.trim()));
    if chars.is_empty() {
        return Err(bad("empty side"));
    }
    let mut i = 0;
    while i < chars.len() {
        let mut sign = 1.0;
        while i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
            if chars[i] == '-' {
                sign = -sign;
            }
            i += 1;
        }
        let start = i;
        let mut number = None;
        if i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let txt: String = chars[start..i].iter().collect();
            number = Some(txt.parse::<f64>().map_err(|_| bad("malformed number"))?);
            if i < chars.len() && chars[i] == '*' {
                i += 1;
            } else {
                constant += sign * number.unwrap();
                continue;
            }
        }
        let lstart = i;
        while i < chars.len() && !matches!(chars[i], '+' | '-' | '*') {
            i += 1;
        }
        // Labels may contain `~`; a `-` directly after `~` never occurs in labels.
        let label: String = chars[lstart..i].iter().collect();
        if label.is_empty() {
            return Err(bad("expected a parameter label"));
        }
        let k = table
            .index_of(&label)
            .ok_or_else(|| InferenceError::Contrast(format!("unknown parameter `{label}`")))?;
        coef[k] += sign * number.unwrap_or(1.0);
    }
    Ok((coef, constant))
}
