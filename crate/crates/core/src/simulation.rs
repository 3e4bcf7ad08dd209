//! Data simulation from a latent variable model and Monte Carlo calibration
//! of test rejection rates.
//!
//! Replicate r at sample size n draws from `ChaCha8Rng` seeded with
//! `seed ^ mix(n)` on stream r, so results do not depend on the worker count.

use crate::correction::{algorithm1, algorithm2, CorrectionOptions};
use crate::data::Dataset;
use crate::estimation::{fit, FitError, FitOptions, FitStatus};
use crate::inference::{parse_contrasts, ClusterIndex, Correction, InferenceContext, InferenceSource};
use crate::model_spec::{index_parameters, parse_model, Matrix, ModelSpec, ParameterTable};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("covariance matrix {0:?} is not positive semi-definite")]
    InvalidCovariance(Matrix),
    #[error("(I - B) is singular at the generative values")]
    SingularStructural,
    #[error("invalid study: {0}")]
    InvalidStudy(String),
    #[error("every replicate was discarded at n = {n}")]
    AllDiscarded { n: usize, report: Box<CalibrationReport> },
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

/// Distribution of a simulated exogenous column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Covariate {
    StandardNormal,
    /// Balanced 0/1 group indicator (first half 0).
    BalancedBinary,
}

fn psd_factor(s: &DMatrix<f64>, which: Matrix) -> Result<DMatrix<f64>, SimulationError> {
    if s.nrows() == 0 {
        return Ok(s.clone());
    }
    let eig = s.clone().symmetric_eigen();
    let norm = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&v| v < -1e-10 * norm.max(1e-300)) {
        return Err(SimulationError::InvalidCovariance(which));
    }
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d))
}

fn normals<R: Rng>(rng: &mut R, n: usize, k: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            z[(i, j)] = rng.sample(StandardNormal);
        }
    }
    z
}

/// Draws Y given X from the model: ζ ~ N(0, Σ_ζ), η = (α + XΓ + ζ)(I − B)⁻¹,
/// ε ~ N(0, Σ_ε), Y = ν + ηΛ + XK + ε.
pub fn simulate_y<R: Rng>(
    table: &ParameterTable,
    theta: &DVector<f64>,
    x: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>, SimulationError> {
    let (n, m, q) = (x.nrows(), table.m(), table.q());
    let f = |mat| table.fill(mat, theta);
    let fz = psd_factor(&f(Matrix::SigmaZeta), Matrix::SigmaZeta)?;
    let fe = psd_factor(&f(Matrix::SigmaEps), Matrix::SigmaEps)?;
    let a = if q == 0 {
        DMatrix::zeros(0, 0)
    } else {
        (DMatrix::identity(q, q) - f(Matrix::Beta))
            .try_inverse()
            .ok_or(SimulationError::SingularStructural)?
    };
    let ones = DMatrix::from_element(n, 1, 1.0);
    let zeta = normals(rng, n, q) * fz.transpose();
    let eta = (&ones * f(Matrix::Alpha) + x * f(Matrix::Gamma) + zeta) * a;
    let eps = normals(rng, n, m) * fe.transpose();
    Ok(&ones * f(Matrix::Nu) + eta * f(Matrix::Lambda) + x * f(Matrix::Kappa) + eps)
}

/// Draws covariates then Y. Exogenous variables missing from `covariates`
/// are standard normal.
pub fn simulate<R: Rng>(
    table: &ParameterTable,
    theta: &DVector<f64>,
    n: usize,
    covariates: &[(String, Covariate)],
    rng: &mut R,
) -> Result<Dataset, SimulationError> {
    let l = table.l();
    let mut x = DMatrix::zeros(n, l);
    for (j, name) in table.exogenous.iter().enumerate() {
        let kind = covariates
            .iter()
            .find(|(c, _)| c == name)
            .map(|c| c.1)
            .unwrap_or(Covariate::StandardNormal);
        for i in 0..n {
            x[(i, j)] = match kind {
                Covariate::StandardNormal => rng.sample(StandardNormal),
                Covariate::BalancedBinary => (i >= n / 2) as u8 as f64,
            };
        }
    }
    let y = simulate_y(table, theta, &x, rng)?;
    Ok(Dataset::new(y, x))
}

/// Reorders columns of a dataset built for `from` into the layout of `to`.
pub fn remap(data: &Dataset, from: &ParameterTable, to: &ParameterTable) -> Result<Dataset, SimulationError> {
    let pick = |names_to: &[String], names_from: &[String], src: &DMatrix<f64>, what: &str| {
        let mut out = DMatrix::zeros(data.n(), names_to.len());
        for (j, name) in names_to.iter().enumerate() {
            let k = names_from.iter().position(|x| x == name).ok_or_else(|| {
                SimulationError::InvalidStudy(format!("{what} `{name}` is not simulated by the generative model"))
            })?;
            out.set_column(j, &src.column(k));
        }
        Ok(out)
    };
    Ok(Dataset::new(
        pick(&to.endogenous, &from.endogenous, &data.y, "endogenous variable")?,
        pick(&to.exogenous, &from.exogenous, &data.x, "exogenous variable")?,
    ))
}

/// Generative values: 0 for intercepts (ν, α), 1 for everything else.
pub fn default_generative_values(table: &ParameterTable) -> DVector<f64> {
    DVector::from_iterator(
        table.p(),
        table.params.iter().map(|p| {
            if p.touches(Matrix::Nu) || p.touches(Matrix::Alpha) {
                0.0
            } else {
                1.0
            }
        }),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub name: String,
    /// Contrast expression over investigator labels, e.g. `nu2 = 0`.
    pub expr: String,
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub name: String,
    pub generative: ModelSpec,
    pub theta_true: DVector<f64>,
    pub investigator: ModelSpec,
    pub covariates: Vec<(String, Covariate)>,
    pub hypotheses: Vec<Hypothesis>,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    /// Cluster-robust Wald tests with one cluster per observation.
    pub robust: bool,
    pub corrections: Vec<Correction>,
    /// Rejection levels; the first one is the headline rate.
    pub alphas: Vec<f64>,
}

/// Tallies for one (hypothesis, n, correction) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCell {
    pub hypothesis: String,
    pub n: usize,
    pub correction: Correction,
    pub rejection_rate: f64,
    /// (α, rate) for every requested level.
    pub rejection_rates: Vec<(f64, f64)>,
    pub used: usize,
    /// Discards keyed by reason.
    pub discarded: BTreeMap<String, usize>,
    /// Mean over used replicates with finite df; ∞ when none is finite.
    pub mean_df: f64,
    pub mean_se: f64,
}

impl CalibrationCell {
    pub fn discarded_total(&self) -> usize {
        self.discarded.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub study: String,
    pub replicates: usize,
    pub seed: u64,
    pub cells: Vec<CalibrationCell>,
    /// Wall time per sample size.
    pub timing: Vec<(usize, Duration)>,
}

impl CalibrationReport {
    pub fn cell(&self, hypothesis: &str, n: usize, correction: Correction) -> Option<&CalibrationCell> {
        self.cells
            .iter()
            .find(|c| c.hypothesis == hypothesis && c.n == n && c.correction == correction)
    }
}

#[derive(Debug, Clone)]
enum Outcome {
    Test { p: f64, df: f64, se: f64 },
    Failed(String),
}

fn mix(n: u64) -> u64 {
    let mut z = n.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for replicate `r` at sample size `n`.
pub fn replicate_rng(seed: u64, n: usize, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ mix(n as u64));
    rng.set_stream(r as u64);
    rng
}

struct Compiled {
    gen_table: ParameterTable,
    inv_table: ParameterTable,
    contrasts: Vec<(DVector<f64>, f64)>,
}

fn compile(config: &StudyConfig) -> Result<Compiled, SimulationError> {
    let gen_table = index_parameters(&config.generative);
    let inv_table = index_parameters(&config.investigator);
    if config.theta_true.len() != gen_table.p() {
        return Err(SimulationError::InvalidStudy(format!(
            "generative θ has {} entries, model has {} parameters",
            config.theta_true.len(),
            gen_table.p()
        )));
    }
    let mut contrasts = Vec::new();
    for h in &config.hypotheses {
        let (c, r) = parse_contrasts(&inv_table, &h.expr)
            .map_err(|e| SimulationError::InvalidStudy(format!("hypothesis `{}`: {e}", h.name)))?;
        if c.nrows() != 1 {
            return Err(SimulationError::InvalidStudy(format!("hypothesis `{}` must be a single equation", h.name)));
        }
        contrasts.push((c.row(0).transpose(), r[0]));
    }
    if config.alphas.is_empty() {
        return Err(SimulationError::InvalidStudy("no rejection level".into()));
    }
    Ok(Compiled {
        gen_table,
        inv_table,
        contrasts,
    })
}

fn run_replicate(config: &StudyConfig, comp: &Compiled, n: usize, r: usize) -> Result<Vec<Outcome>, String> {
    let mut rng = replicate_rng(config.seed, n, r);
    let raw = simulate(&comp.gen_table, &config.theta_true, n, &config.covariates, &mut rng)
        .map_err(|_| "simulation-error".to_string())?;
    let data = remap(&raw, &comp.gen_table, &comp.inv_table).map_err(|_| "simulation-error".to_string())?;
    let f = fit(&comp.inv_table, &data, &FitOptions::default()).map_err(|e| match e {
        FitError::SingularInformation { .. } => FitStatus::SingularInfo.to_string(),
        _ => "fit-error".to_string(),
    })?;
    if !f.converged() {
        return Err(f.status.to_string());
    }
    let opts = CorrectionOptions::default();
    let needs = |set: &[Correction]| config.corrections.iter().any(|c| set.contains(c));
    let alg1 = needs(&[Correction::Bias, Correction::Full]).then(|| algorithm1(&f, &opts));
    let alg2 = needs(&[Correction::FullWithNeff]).then(|| algorithm2(&f, &opts));
    let clusters = config.robust.then(|| ClusterIndex::singletons(n));
    let h = comp.contrasts.len();
    let mut out = Vec::with_capacity(config.corrections.len() * h);
    for &corr in &config.corrections {
        let source: Result<&dyn InferenceSource, String> = match corr {
            Correction::None | Correction::Satterthwaite => Ok(&f),
            Correction::Bias | Correction::Full => match alg1.as_ref().expect("computed") {
                Ok(c) if c.converged => Ok(c),
                Ok(_) => Err("correction-not-converged".into()),
                Err(_) => Err("correction-error".into()),
            },
            Correction::FullWithNeff => match alg2.as_ref().expect("computed") {
                Ok(c) if c.converged => Ok(c),
                Ok(_) => Err("correction-not-converged".into()),
                Err(_) => Err("correction-error".into()),
            },
        };
        let ctx = source.and_then(|s| {
            InferenceContext::new(s, corr, clusters.as_ref()).map_err(|_| "test-error".to_string())
        });
        for (c, null) in &comp.contrasts {
            out.push(match &ctx {
                Err(e) => Outcome::Failed(e.clone()),
                Ok(ctx) => match ctx.wald(c, *null) {
                    Ok(w) => Outcome::Test {
                        p: w.p_value,
                        df: w.df,
                        se: w.se,
                    },
                    Err(_) => Outcome::Failed("test-error".into()),
                },
            });
        }
    }
    Ok(out)
}

/// Runs the calibration on a pool of `workers` threads (0 = rayon default).
pub fn calibrate_type1(config: &StudyConfig, workers: usize) -> Result<CalibrationReport, SimulationError> {
    let comp = compile(config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SimulationError::Pool(e.to_string()))?;
    let h = comp.contrasts.len();
    let mut cells = Vec::new();
    let mut timing = Vec::new();
    let mut empty_n = None;
    for &n in &config.sample_sizes {
        let start = Instant::now();
        let results: Vec<Result<Vec<Outcome>, String>> = pool.install(|| {
            (0..config.replicates)
                .into_par_iter()
                .map(|r| run_replicate(config, &comp, n, r))
                .collect()
        });
        timing.push((n, start.elapsed()));
        let mut any_used = false;
        for (ci, &corr) in config.corrections.iter().enumerate() {
            for (hi, hyp) in config.hypotheses.iter().enumerate() {
                let mut used = 0usize;
                let mut rejections = vec![0usize; config.alphas.len()];
                let mut discarded: BTreeMap<String, usize> = BTreeMap::new();
                let (mut df_sum, mut df_count, mut se_sum) = (0.0, 0usize, 0.0);
                for res in &results {
                    match res {
                        Err(reason) => *discarded.entry(reason.clone()).or_default() += 1,
                        Ok(outs) => match &outs[ci * h + hi] {
                            Outcome::Failed(reason) => *discarded.entry(reason.clone()).or_default() += 1,
                            Outcome::Test { p, df, se } => {
                                used += 1;
                                for (a, &alpha) in config.alphas.iter().enumerate() {
                                    if *p < alpha {
                                        rejections[a] += 1;
                                    }
                                }
                                if df.is_finite() {
                                    df_sum += df;
                                    df_count += 1;
                                }
                                se_sum += se;
                            }
                        },
                    }
                }
                any_used |= used > 0;
                let rate = |k: usize| if used == 0 { f64::NAN } else { k as f64 / used as f64 };
                let rates: Vec<(f64, f64)> = config
                    .alphas
                    .iter()
                    .zip(&rejections)
                    .map(|(&a, &k)| (a, rate(k)))
                    .collect();
                cells.push(CalibrationCell {
                    hypothesis: hyp.name.clone(),
                    n,
                    correction: corr,
                    rejection_rate: rates[0].1,
                    rejection_rates: rates,
                    used,
                    discarded,
                    mean_df: if df_count == 0 {
                        f64::INFINITY
                    } else {
                        df_sum / df_count as f64
                    },
                    mean_se: if used == 0 { f64::NAN } else { se_sum / used as f64 },
                });
            }
        }
        if !any_used && empty_n.is_none() {
            empty_n = Some(n);
        }
    }
    let report = CalibrationReport {
        study: config.name.clone(),
        replicates: config.replicates,
        seed: config.seed,
        cells,
        timing,
    };
    match empty_n {
        Some(n) => Err(SimulationError::AllDiscarded {
            n,
            report: Box::new(report),
        }),
        None => Ok(report),
    }
}

const STUDY_A_GEN: &str = "
exogenous: Age, Gene1
Y1 ~ 0*1 + 1*eta
Y2 ~ 1*eta
Y3 ~ 1*eta
eta ~ 1 + Age
Y1 ~~ s*Y1; Y2 ~~ s*Y2; Y3 ~~ s*Y3
";

const STUDY_A_INV: &str = "
Y1 ~ 0*1 + 1*eta
Y2 ~ nu2*1 + 1*eta
Y3 ~ 1*eta
eta ~ alpha*1 + gamma2*Age + gamma1*Gene1
Y1 ~~ sigma2*Y1; Y2 ~~ sigma2*Y2; Y3 ~~ sigma2*Y3
eta ~~ tau*eta
";

const STUDY_B_GEN: &str = "
exogenous: Age, Gene1, Gene2
Y1 ~ 0*1 + 1*eta
Y2 ~ eta
Y3 ~ eta
Y4 ~ 0*eta
eta ~ 1 + Age
";

const STUDY_B_INV: &str = "
Y1 ~ 0*1 + 1*eta + k1*Gene2
Y2 ~ nu2*1 + eta
Y3 ~ eta
Y4 ~ lambda4*eta
eta ~ alpha*1 + gamma1*Gene1 + gamma2*Age
";

const STUDY_C_GEN: &str = "
exogenous: Age, Gene1, Gene2
Y1 ~ 0*1 + 1*eta1
Y2 ~ eta1
Y3 ~ eta1
Y4 ~ 0*eta1
Y5 ~ eta1
Z1 ~ 0*1 + 1*eta2
Z2 ~ eta2
Z3 ~ eta2
Z4 ~ eta2
Z5 ~ eta2
eta1 ~ 1 + Age
eta2 ~ 1 + Age
";

const STUDY_C_INV: &str = "
Y1 ~ 0*1 + 1*eta1 + k1*Gene2
Y2 ~ nu2*1 + eta1
Y3 ~ eta1
Y4 ~ lambda4*eta1
Y5 ~ eta1
Z1 ~ 0*1 + 1*eta2
Z2 ~ eta2
Z3 ~ eta2
Z4 ~ eta2
Z5 ~ eta2
eta1 ~ alpha1*1 + gamma1*Gene1 + Age
eta2 ~ alpha2*1 + b1*eta1 + Age
Y1 ~~ sigma12*Y2
";

fn hyps(list: &[(&str, &str)]) -> Vec<Hypothesis> {
    list.iter()
        .map(|(n, e)| Hypothesis {
            name: n.to_string(),
            expr: e.to_string(),
        })
        .collect()
}

fn study(name: &str, gen: &str, inv: &str, hypotheses: Vec<Hypothesis>, robust: bool) -> StudyConfig {
    let generative = parse_model(gen).expect("built-in generative model parses");
    let investigator = parse_model(inv).expect("built-in investigator model parses");
    let theta_true = default_generative_values(&index_parameters(&generative));
    StudyConfig {
        name: name.into(),
        generative,
        theta_true,
        investigator,
        covariates: Vec::new(),
        hypotheses,
        sample_sizes: vec![20, 30, 50, 100, 500],
        replicates: 2000,
        seed: 1,
        robust,
        corrections: vec![Correction::None, Correction::FullWithNeff],
        alphas: vec![0.05],
    }
}

/// Studies A (random intercept, 7 parameters), B (heteroscedastic factor
/// model with robust tests, 15 parameters) and C (two latent variables,
/// 36 parameters). Generative values are 0 for intercepts and 1 elsewhere;
/// every tested parameter is 0 in the generative model and all covariates
/// are independent standard normal.
pub fn builtin_studies() -> Vec<StudyConfig> {
    vec![
        study("A", STUDY_A_GEN, STUDY_A_INV, hyps(&[("nu2", "nu2 = 0"), ("gamma1", "gamma1 = 0")]), false),
        study(
            "B",
            STUDY_B_GEN,
            STUDY_B_INV,
            hyps(&[
                ("nu2", "nu2 = 0"),
                ("lambda4", "lambda4 = 0"),
                ("gamma1", "gamma1 = 0"),
                ("k1", "k1 = 0"),
            ]),
            true,
        ),
        study(
            "C",
            STUDY_C_GEN,
            STUDY_C_INV,
            hyps(&[
                ("nu2", "nu2 = 0"),
                ("k1", "k1 = 0"),
                ("lambda4", "lambda4 = 0"),
                ("gamma1", "gamma1 = 0"),
                ("b1", "b1 = 0"),
                ("sigma12", "sigma12 = 0"),
            ]),
            false,
        ),
    ]
}

/// Built-in study by name (`A`, `B` or `C`, case-insensitive).
pub fn builtin_study(name: &str) -> Option<StudyConfig> {
    builtin_studies().into_iter().find(|s| s.name.eq_ignore_ascii_case(name))
}
