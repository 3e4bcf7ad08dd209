mod common;

use common::{linear_errors, linear_regression, random_identified, random_mean_variance, rng};
use lvm_infer_core::correction::{bias_psi, corrected_residuals, leverage, observation_gradient};
use lvm_infer_core::estimation::fit_from;
use lvm_infer_core::moments::{conditional_moments, hessian, Order};
use lvm_infer_core::{
    algorithm1, algorithm2, fit, index_parameters, parse_model, Algorithm, CorrectionError, CorrectionOptions,
    Dataset, FitOptions,
};
use nalgebra::DMatrix;
use rand::Rng;

#[test]
fn linear_model_closed_forms() {
    let mut r = rng(21);
    for (n, p) in [(10, 1), (10, 7), (25, 4), (60, 12), (150, 30)] {
        let e = linear_errors(&mut r, n, p);
        assert!(e.sigma < 1e-6, "{e:?}");
        assert!(e.naive_df < 1e-6, "{e:?}");
        assert!(e.n_eff < 1e-6, "{e:?}");
        assert!(e.df < 1e-6, "{e:?}");
    }
}

#[test]
fn linear_model_psi_is_scaled_hat_matrix() {
    let mut r = rng(22);
    let (text, data) = linear_regression(&mut r, 30, 3);
    let table = index_parameters(&parse_model(&text).unwrap());
    let f = fit(&table, &data, &FitOptions::default()).unwrap();
    let sigma2 = f.theta_hat[table.index_of("Y~~Y").unwrap()];
    let mut x = DMatrix::from_element(30, 4, 1.0);
    x.view_mut((0, 1), (30, 3)).copy_from(&data.x);
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let mut avg = 0.0;
    for i in 0..30 {
        let psi = bias_psi(&observation_gradient(&f.bundle, i), &f.vcov);
        let h = (x.row(i) * &xtx_inv * x.row(i).transpose())[(0, 0)];
        assert!((psi[(0, 0)] - sigma2 * h).abs() < 1e-10);
        avg += psi[(0, 0)] / 30.0;
    }
    assert!((avg - 4.0 / 30.0 * sigma2).abs() < 1e-10);
}

#[test]
fn linear_model_leverage_and_corrected_residuals() {
    let mut r = rng(23);
    let (text, data) = linear_regression(&mut r, 20, 2);
    let table = index_parameters(&parse_model(&text).unwrap());
    let f = fit(&table, &data, &FitOptions::default()).unwrap();
    let mut x = DMatrix::from_element(20, 3, 1.0);
    x.view_mut((0, 1), (20, 2)).copy_from(&data.x);
    let hat = &x * (x.transpose() * &x).try_inverse().unwrap() * x.transpose();
    let lev = leverage(&f, &f.residuals);
    let tight = CorrectionOptions {
        max_iter: 2000,
        tol_frob: 1e-13,
        acceleration: 5,
    };
    let c = algorithm1(&f, &tight).unwrap();
    let xc = corrected_residuals(&c.omega_c, &f.residuals, &c.psi_i).unwrap();
    for i in 0..20 {
        assert!((lev[(i, 0)] - hat[(i, i)]).abs() < 1e-10);
        let expect = f.residuals[(i, 0)] / (1.0 - hat[(i, i)]).sqrt();
        assert!((xc[(i, 0)] - expect).abs() < 1e-6 * expect.abs().max(1.0), "{i}");
    }
}

/// ∂μ̂_i/∂Y_i from refitting after perturbing Y_i matches the analytic
/// leverage when the observed Hessian stands in for the expected information.
#[test]
fn leverage_matches_refit_derivative() {
    let mut r = rng(24);
    let model = random_identified(&mut r, 40);
    let opts = FitOptions {
        tol_score: 1e-9,
        tol_loglik: 1e-14,
        ..FitOptions::default()
    };
    let f = fit(&model.table, &model.data, &opts).unwrap();
    assert!(f.converged());
    let b2 = conditional_moments(&model.table, &f.theta_hat, &model.data.x, Order::Second).unwrap();
    let mut obs = f.clone();
    obs.vcov = (-hessian(&b2, &model.data.y).unwrap()).try_inverse().unwrap();
    let lev = leverage(&obs, &f.residuals);
    let h = 1e-5;
    for i in [0, 7, 19] {
        for t in 0..model.table.m() {
            let refit = |d: f64| {
                let mut y = model.data.y.clone();
                y[(i, t)] += d;
                let g = fit_from(&model.table, &Dataset::new(y, model.data.x.clone()), &f.theta_hat, &opts).unwrap();
                g.bundle.mu[(i, t)]
            };
            let fd = (refit(h) - refit(-h)) / (2.0 * h);
            assert!((fd - lev[(i, t)]).abs() < 1e-5, "obs {i} var {t}: fd {fd} analytic {}", lev[(i, t)]);
        }
    }
}

#[test]
fn psi_nonnegative_and_effective_sizes_bounded() {
    let mut r = rng(25);
    for _ in 0..10 {
        let model = random_identified(&mut r, 60);
        let f = fit(&model.table, &model.data, &FitOptions::default()).unwrap();
        if !f.converged() {
            continue;
        }
        let c = match algorithm2(&f, &CorrectionOptions::default()) {
            Ok(c) => c,
            Err(e) => panic!("{e}"),
        };
        let eig = c.psi_bar.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() > -1e-12);
        for p in &c.psi_i {
            assert!(p.clone().symmetric_eigen().eigenvalues.min() > -1e-12);
        }
        assert!(c.omega_c.clone().cholesky().is_some());
        assert!(c.n_eff.iter().all(|&v| v > 0.0 && v <= 60.0));
        assert!(c.converged);
        assert!(c.trace.last().unwrap().omega_change < 1e-5);
        assert!(matches!(c.algorithm, Algorithm::Two | Algorithm::TwoFellBackToOne));
    }
}

#[test]
fn psi_norm_non_decreasing_on_mean_variance_models() {
    let mut r = rng(26);
    for case in 0..15 {
        let n = r.random_range(8..40);
        let model = random_mean_variance(&mut r, n);
        assert!(model.table.is_mean_variance());
        let f = fit(&model.table, &model.data, &FitOptions::default()).unwrap();
        if !f.converged() {
            continue;
        }
        let c = algorithm1(&f, &CorrectionOptions::default()).unwrap();
        assert!(c.converged, "case {case}");
        for w in c.trace.windows(2) {
            assert!(w[1].psi_norm >= w[0].psi_norm - 1e-10, "case {case}");
        }
    }
}

#[test]
fn too_many_mean_parameters() {
    let spec = parse_model("Y ~ X1 + X2 + X3").unwrap();
    let table = index_parameters(&spec);
    let mut r = rng(27);
    let x = DMatrix::from_fn(4, 3, |_, _| r.random_range(-1.0..1.0));
    let y = DMatrix::from_fn(4, 1, |_, _| r.random_range(-1.0..1.0));
    let f = fit(&table, &Dataset::new(y, x), &FitOptions::default());
    if let Ok(f) = f {
        if f.converged() {
            let e = algorithm1(&f, &CorrectionOptions::default()).unwrap_err();
            assert!(matches!(e, CorrectionError::TooManyMeanParameters { p_mu: 4, n: 4 }));
        }
    }
}

#[test]
fn corrected_theta_keeps_mean_parameters() {
    let mut r = rng(28);
    let (model, f) = loop {
        let model = random_identified(&mut r, 50);
        let f = fit(&model.table, &model.data, &FitOptions::default()).unwrap();
        if f.converged() {
            break (model, f);
        }
    };
    let c = algorithm1(&f, &CorrectionOptions::default()).unwrap();
    let var = model.table.variance_indices();
    for k in 0..model.table.p() {
        if !var.contains(&k) {
            assert_eq!(c.theta_c[k], f.theta_hat[k]);
        }
    }
}

mod unit {
    use lvm_infer_core::correction::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_sym(&i3).unwrap() - &i3).norm() < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = matrix_sqrt_sym(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).norm() < 1e-14);
    }

    #[test]
    fn sqrt_rejects_negative() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(matrix_sqrt_sym(&a), Err(CorrectionError::NegativeEigenvalue(_))));
    }

    #[test]
    fn zero_psi_leaves_residuals() {
        let omega = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let xi = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 1.2, 0.1, -0.3, 0.7]);
        let psi = vec![DMatrix::zeros(2, 2); 3];
        let xc = corrected_residuals(&omega, &xi, &psi).unwrap();
        assert!((xc - xi).norm() < 1e-12);
    }

    #[test]
    fn zero_gradient_gives_zero_psi() {
        let g = DMatrix::zeros(4, 2);
        let v = DMatrix::identity(4, 4);
        assert_eq!(bias_psi(&g, &v), DMatrix::zeros(2, 2));
    }

    #[test]
    fn effective_size_rejects_nonpositive() {
        let lev = DMatrix::from_element(2, 1, 1.0);
        assert!(effective_sample_size(&lev).is_err());
        let lev = DMatrix::from_element(4, 1, 0.25);
        assert_eq!(effective_sample_size(&lev).unwrap()[0], 3.0);
    }
}
