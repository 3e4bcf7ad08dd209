#![allow(dead_code)]

use lvm_infer_core::model_spec::Matrix;
use lvm_infer_core::simulation::simulate;
use lvm_infer_core::{index_parameters, parse_model, Dataset, ParameterTable};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct RandomModel {
    pub text: String,
    pub table: ParameterTable,
    pub theta: DVector<f64>,
    pub data: Dataset,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values by the matrix of the parameter's first cell: mean terms small,
/// loadings near 1, variances in [0.5, 1.5], covariances small enough to keep
/// every Σ positive definite.
pub fn random_theta<R: Rng>(table: &ParameterTable, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(
        table.p(),
        table.params.iter().map(|p| {
            let c = p.cells[0];
            match c.matrix {
                Matrix::Nu | Matrix::Alpha | Matrix::Kappa | Matrix::Gamma => rng.random_range(-1.0..1.0),
                Matrix::Lambda => rng.random_range(0.5..1.5),
                Matrix::Beta => rng.random_range(-0.6..0.6),
                Matrix::SigmaEps | Matrix::SigmaZeta if c.row == c.col => rng.random_range(0.5..1.5),
                _ => rng.random_range(-0.3..0.3),
            }
        }),
    )
}

fn finish<R: Rng>(text: String, n: usize, rng: &mut R) -> RandomModel {
    let spec = parse_model(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
    let table = index_parameters(&spec);
    let theta = random_theta(&table, rng);
    let mut sim_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let data = simulate(&table, &theta, n, &[], &mut sim_rng).expect("valid generative model");
    RandomModel {
        text,
        table,
        theta,
        data,
    }
}

/// General model with m ≤ 4 and p ≤ `max_p`: one or two latents, optional
/// latent regression, covariate effects, residual covariance and shared labels.
pub fn random_model<R: Rng>(rng: &mut R, n: usize, max_p: usize) -> RandomModel {
    loop {
        let m = rng.random_range(2..=4);
        let two = m >= 3 && rng.random_bool(0.4);
        let l = rng.random_range(0..=2);
        let mut lines = vec![if two { "latent: eta1, eta2".to_string() } else { "latent: eta1".to_string() }];
        for j in 1..=m {
            let lat = if two && j > m / 2 { "eta2" } else { "eta1" };
            let icpt = if rng.random_bool(0.5) { " + 0*1" } else { "" };
            lines.push(format!("Y{j} ~ {lat}{icpt}"));
            if l > 0 && rng.random_bool(0.25) {
                lines.push(format!("Y{j} ~ X{}", rng.random_range(1..=l)));
            }
        }
        if l > 0 && rng.random_bool(0.6) {
            lines.push(format!("eta1 ~ X{}", rng.random_range(1..=l)));
        }
        if rng.random_bool(0.3) {
            lines.push("eta1 ~ 1".into());
        }
        if two {
            lines.push("eta2 ~ eta1".into());
        }
        if rng.random_bool(0.3) {
            lines.push("Y1 ~~ Y2".into());
        }
        if rng.random_bool(0.3) {
            for j in 1..=m {
                lines.push(format!("Y{j} ~~ s*Y{j}"));
            }
        }
        if l > 0 && !lines.iter().any(|s| s.contains('X')) {
            lines.push("Y1 ~ X1".into());
        }
        let text = lines.join("\n");
        let p = index_parameters(&parse_model(&text).expect("generated model parses")).p();
        if p <= max_p {
            return finish(text, n, rng);
        }
    }
}

/// Single-factor model with m ∈ {3, 4} indicators and covariates, identified
/// so that fits converge at moderate n.
pub fn random_identified<R: Rng>(rng: &mut R, n: usize) -> RandomModel {
    let m = rng.random_range(3..=4);
    let mut lines = vec!["latent: eta".to_string(), "eta ~ X1".into()];
    for j in 1..=m {
        lines.push(format!("Y{j} ~ eta"));
    }
    if rng.random_bool(0.5) {
        lines.push("Y2 ~ X2".into());
    } else {
        lines.push("eta ~ X2".into());
    }
    finish(lines.join("\n"), n, rng)
}

/// Model whose parameters split into mean and variance parameters: all
/// loadings fixed, covariate effects on Y and η, free or shared variances.
pub fn random_mean_variance<R: Rng>(rng: &mut R, n: usize) -> RandomModel {
    let m = rng.random_range(2..=4);
    let shared = rng.random_bool(0.5);
    let mut lines = vec!["latent: eta".to_string()];
    for j in 1..=m {
        lines.push(format!("Y{j} ~ 1*eta"));
        if shared {
            lines.push(format!("Y{j} ~~ s*Y{j}"));
        }
    }
    lines.push("Y1 ~ 0*1".into());
    lines.push("eta ~ 1 + X1".into());
    if rng.random_bool(0.5) {
        lines.push(format!("Y{m} ~ X2"));
    }
    finish(lines.join("\n"), n, rng)
}

/// ‖a − b‖ / max(‖a‖, 1)
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(1.0)
}

/// Central difference of a matrix-valued function along coordinate k.
pub fn central_diff<F: Fn(&DVector<f64>) -> DMatrix<f64>>(f: F, theta: &DVector<f64>, k: usize, h: f64) -> DMatrix<f64> {
    let mut tp = theta.clone();
    let mut tm = theta.clone();
    tp[k] += h;
    tm[k] -= h;
    (f(&tp) - f(&tm)) / (2.0 * h)
}

/// Standard linear regression with an intercept: n×(p−1) normal design,
/// unit-variance errors.
pub fn linear_regression<R: Rng>(rng: &mut R, n: usize, k: usize) -> (String, Dataset) {
    let mut terms = vec!["1".to_string()];
    for j in 1..=k {
        terms.push(format!("X{j}"));
    }
    let text = format!("Y ~ {}", terms.join(" + "));
    let x = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let y = DMatrix::from_fn(n, 1, |i, _| {
        0.5 + x.row(i).sum() * 0.3 + rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    (text, Dataset::new(y, x))
}

#[derive(Debug, Default, Clone, Copy)]
pub struct DerivativeErrors {
    pub d_mu: f64,
    pub d_omega: f64,
    pub score: f64,
    pub hessian: f64,
    pub d2_mu: f64,
    pub d2_omega: f64,
    pub d_information: f64,
}

impl DerivativeErrors {
    pub fn first(&self) -> f64 {
        self.d_mu.max(self.d_omega).max(self.score)
    }
    pub fn second(&self) -> f64 {
        self.hessian.max(self.d2_mu).max(self.d2_omega).max(self.d_information)
    }
}

/// Largest relative error of every analytic derivative against central
/// differences of the quantity one order below. `weights` exercises the
/// weighted trace term of the information.
pub fn derivative_errors(model: &RandomModel, weights: Option<&DVector<f64>>) -> DerivativeErrors {
    use lvm_infer_core::moments::{
        conditional_moments, d_information, expected_information, hessian, log_likelihood, score, Order,
    };
    let (table, theta, data) = (&model.table, &model.theta, &model.data);
    let x = &data.x;
    let y = &data.y;
    let b = conditional_moments(table, theta, x, Order::Second).unwrap();
    let at = |t: &DVector<f64>| conditional_moments(table, t, x, Order::First).unwrap();
    let h1 = 1e-6;
    let h2 = 1e-5;
    let mut e = DerivativeErrors::default();
    let s = score(&b, y).unwrap().total;
    let hs = hessian(&b, y).unwrap();
    let di = d_information(&b, weights).unwrap();
    let p = table.p();
    let mut fd_score = DVector::zeros(p);
    let mut fd_hess = DMatrix::zeros(p, p);
    for k in 0..p {
        let fd_mu = central_diff(|t| at(t).mu, theta, k, h1);
        e.d_mu = e.d_mu.max(rel_err(&b.d_mu[k], &fd_mu));
        let fd_om = central_diff(|t| at(t).omega, theta, k, h1);
        e.d_omega = e.d_omega.max(rel_err(&b.d_omega[k], &fd_om));
        fd_score[k] = central_diff(
            |t| DMatrix::from_element(1, 1, log_likelihood(&at(t), y).unwrap()),
            theta,
            k,
            h1,
        )[(0, 0)];
        let col = central_diff(|t| DMatrix::from_column_slice(p, 1, score(&at(t), y).unwrap().total.as_slice()), theta, k, h2);
        fd_hess.set_column(k, &col.column(0));
        let fd_info = central_diff(|t| expected_information(&at(t), weights).unwrap(), theta, k, h2);
        e.d_information = e.d_information.max(rel_err(&di[k], &fd_info));
        for l in 0..p {
            let fd2_mu = central_diff(|t| at(t).d_mu[l].clone(), theta, k, h2);
            let fd2_om = central_diff(|t| at(t).d_omega[l].clone(), theta, k, h2);
            let zero_mu = DMatrix::zeros(fd2_mu.nrows(), fd2_mu.ncols());
            let zero_om = DMatrix::zeros(fd2_om.nrows(), fd2_om.ncols());
            let a_mu = b.d2_mu(k, l).unwrap().unwrap_or(&zero_mu);
            let a_om = b.d2_omega(k, l).unwrap().unwrap_or(&zero_om);
            e.d2_mu = e.d2_mu.max(rel_err(a_mu, &fd2_mu));
            e.d2_omega = e.d2_omega.max(rel_err(a_om, &fd2_om));
        }
    }
    let s_m = DMatrix::from_column_slice(p, 1, s.as_slice());
    let fs_m = DMatrix::from_column_slice(p, 1, fd_score.as_slice());
    e.score = rel_err(&s_m, &fs_m);
    e.hessian = rel_err(&hs, &fd_hess);
    e
}

#[derive(Debug, Clone, Copy)]
pub struct LinearErrors {
    pub n: usize,
    pub p: usize,
    /// |σ²_c − RSS/(n−p)| / (RSS/(n−p)) after Algorithm 1.
    pub sigma: f64,
    /// max_j |df_j − n| for the uncorrected Satterthwaite df.
    pub naive_df: f64,
    /// |n^c − (n−p)| after Algorithm 2.
    pub n_eff: f64,
    /// max_j |df_j − (n−p)| after Algorithm 2.
    pub df: f64,
}

/// Closed-form checks on a regression with `p` mean parameters.
pub fn linear_errors<R: Rng>(rng: &mut R, n: usize, p: usize) -> LinearErrors {
    use lvm_infer_core::inference::InferenceContext;
    use lvm_infer_core::{algorithm1, algorithm2, fit, Correction, CorrectionOptions, FitOptions};
    let (text, data) = linear_regression(rng, n, p - 1);
    let table = index_parameters(&parse_model(&text).unwrap());
    let f = fit(&table, &data, &FitOptions::default()).unwrap();
    assert!(f.converged(), "{:?}", f.status);
    let rss = f.residuals.norm_squared();
    let target = rss / (n - p) as f64;
    let sig = table.index_of("Y~~Y").unwrap();
    let opts = CorrectionOptions {
        max_iter: 2000,
        tol_frob: 1e-13,
        acceleration: 5,
    };
    let c1 = algorithm1(&f, &opts).unwrap();
    let c2 = algorithm2(&f, &opts).unwrap();
    let raw = InferenceContext::new(&f, Correction::Satterthwaite, None).unwrap();
    let full = InferenceContext::new(&c2, Correction::FullWithNeff, None).unwrap();
    let (mut naive_df, mut df) = (0.0f64, 0.0f64);
    for j in table.mean_indices() {
        let mut c = DVector::zeros(table.p());
        c[j] = 1.0;
        naive_df = naive_df.max((raw.wald(&c, 0.0).unwrap().df - n as f64).abs());
        df = df.max((full.wald(&c, 0.0).unwrap().df - (n - p) as f64).abs());
    }
    LinearErrors {
        n,
        p,
        sigma: (c1.theta_c[sig] - target).abs() / target,
        naive_df,
        n_eff: (c2.n_eff[0] - (n - p) as f64).abs(),
        df,
    }
}

/// Investigator fit of a built-in study on one simulated replicate.
pub fn study_fit(study: &str, n: usize, replicate: usize) -> lvm_infer_core::FitResult {
    use lvm_infer_core::simulation::{builtin_study, remap, replicate_rng};
    use lvm_infer_core::{fit, FitOptions};
    let s = builtin_study(study).unwrap();
    let gt = index_parameters(&s.generative);
    let it = index_parameters(&s.investigator);
    for r in replicate.. {
        let mut rng = replicate_rng(s.seed, n, r);
        let d = simulate(&gt, &s.theta_true, n, &s.covariates, &mut rng).unwrap();
        let d = remap(&d, &gt, &it).unwrap();
        if let Ok(f) = fit(&it, &d, &FitOptions::default()) {
            if f.converged() {
                return f;
            }
        }
    }
    unreachable!()
}
