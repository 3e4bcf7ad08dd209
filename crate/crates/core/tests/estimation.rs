mod common;

use common::{random_identified, rng, study_fit};
use lvm_infer_core::estimation::fit_from;
use lvm_infer_core::{fit, FitOptions, FitStatus};
use nalgebra::DMatrix;

#[test]
fn loglik_trace_is_non_decreasing() {
    let mut r = rng(51);
    for _ in 0..10 {
        let m = random_identified(&mut r, 50);
        if let Ok(f) = fit(&m.table, &m.data, &FitOptions::default()) {
            for w in f.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-12 * w[0].abs());
            }
            if f.converged() {
                assert!(f.max_abs_score < 1e-4);
            }
        }
    }
}

#[test]
fn vcov_inverts_information() {
    let f = study_fit("C", 60, 0);
    let p = f.table.p();
    assert!((&f.vcov * &f.info - DMatrix::<f64>::identity(p, p)).amax() < 1e-8);
}

#[test]
fn refit_from_optimum_is_a_fixed_point() {
    let f = study_fit("B", 40, 0);
    let g = fit_from(&f.table, &f.data, &f.theta_hat, &FitOptions::default()).unwrap();
    assert!(g.iterations <= 1);
    assert!((g.loglik - f.loglik).abs() < 1e-10 * f.loglik.abs());
    assert_eq!(g.status, FitStatus::Converged);
}

#[test]
fn study_a_estimates_near_truth_at_moderate_n() {
    let f = study_fit("A", 500, 0);
    let se = f.se();
    for (k, p) in f.table.params.iter().enumerate() {
        let truth = if matches!(p.label.as_str(), "nu2" | "Y3~1" | "alpha" | "gamma1") { 0.0 } else { 1.0 };
        assert!(((f.theta_hat[k] - truth) / se[k]).abs() < 3.0, "{}", p.label);
    }
}

#[test]
fn fit_is_deterministic() {
    let f = study_fit("A", 30, 3);
    let g = fit(&f.table, &f.data, &FitOptions::default()).unwrap();
    assert_eq!(f.theta_hat, g.theta_hat);
    assert_eq!(f.loglik, g.loglik);
}

mod unit {
    use lvm_infer_core::estimation::*;
    use lvm_infer_core::data::Dataset;
    use lvm_infer_core::linalg::least_squares;
    use lvm_infer_core::model_spec::{index_parameters, parse_model};
    use nalgebra::DMatrix;

    fn regression_data() -> Dataset {
        let x = DMatrix::from_row_slice(8, 2, &[
            0.1, 1.0, -0.4, 0.3, 1.2, -0.7, 0.5, 0.5, -1.1, 0.2, 0.9, -1.3, -0.2, 0.8, 0.3, 0.1,
        ]);
        let y = DMatrix::from_column_slice(8, 1, &[1.3, 0.2, 2.1, 1.1, -0.5, 2.4, 0.4, 1.0]);
        Dataset::new(y, x)
    }

    #[test]
    fn regression_matches_ols_and_ml_variance() {
        let table = index_parameters(&parse_model("Y ~ X1 + X2").unwrap());
        let data = regression_data();
        let f = fit(&table, &data, &FitOptions::default()).unwrap();
        assert!(f.converged());
        let design = DMatrix::from_fn(8, 3, |i, j| if j == 0 { 1.0 } else { data.x[(i, j - 1)] });
        let beta = least_squares(&design, &data.y.column(0).clone_owned()).unwrap();
        let rss = (data.y.column(0) - &design * &beta).norm_squared();
        for k in 0..3 {
            assert!((f.theta_hat[k] - beta[k]).abs() < 1e-8);
        }
        assert!((f.theta_hat[3] - rss / 8.0).abs() < 1e-8);
    }

    #[test]
    fn start_beta_is_ols() {
        let table = index_parameters(&parse_model("Y ~ X1 + X2").unwrap());
        let data = regression_data();
        let start = starting_values(&table, &data).unwrap();
        let design = DMatrix::from_fn(8, 3, |i, j| if j == 0 { 1.0 } else { data.x[(i, j - 1)] });
        let beta = least_squares(&design, &data.y.column(0).clone_owned()).unwrap();
        for k in 0..3 {
            assert!((start[k] - beta[k]).abs() < 1e-10);
        }
        let var = data.y.column(0).variance() * 8.0 / 7.0;
        assert!(start[3] > 0.0 && start[3] < var);
    }

    #[test]
    fn zero_variance_column_named() {
        let table = index_parameters(&parse_model("Yc ~ X1").unwrap());
        let data = Dataset::new(DMatrix::from_element(5, 1, 2.0), DMatrix::from_fn(5, 1, |i, _| i as f64));
        assert_eq!(starting_values(&table, &data), Err(FitError::ZeroVariance("Yc".into())));
    }

    #[test]
    fn refit_from_optimum_is_fixed_point() {
        let table = index_parameters(&parse_model("Y ~ X1 + X2").unwrap());
        let data = regression_data();
        let f = fit(&table, &data, &FitOptions::default()).unwrap();
        let g = fit_from(&table, &data, &f.theta_hat, &FitOptions::default()).unwrap();
        assert!(g.converged());
        assert!(g.iterations <= 1);
        assert!((g.loglik - f.loglik).abs() < 1e-10);
    }
}
