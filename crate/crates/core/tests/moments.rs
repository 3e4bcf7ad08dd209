use lvm_infer_core::moments::*;
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use lvm_infer_core::model_spec::{index_parameters, parse_model};

#[test]
fn random_intercept_omega() {
    let spec = parse_model("latent: eta; Y1 ~ 1*eta; Y2 ~ 1*eta; Y3 ~ 1*eta; Y1 ~~ s*Y1; Y2 ~~ s*Y2; Y3 ~~ s*Y3").unwrap();
    let table = index_parameters(&spec);
    let mut theta = table.start_values();
    theta[table.index_of("s").unwrap()] = 0.7;
    theta[table.index_of("eta~~eta").unwrap()] = 1.9;
    let b = conditional_moments(&table, &theta, &DMatrix::zeros(4, 0), Order::First).unwrap();
    let expect = DMatrix::from_element(3, 3, 1.9) + DMatrix::identity(3, 3) * 0.7;
    assert!((b.omega - expect).norm() < 1e-14);
}

#[test]
fn single_factor_omega() {
    let spec = parse_model("latent: eta; Y1 ~ eta; Y2 ~ eta").unwrap();
    let table = index_parameters(&spec);
    let mut theta = table.start_values();
    let (lam, tau, s1, s2) = (0.8, 1.7, 0.4, 0.9);
    theta[table.index_of("Y2~eta").unwrap()] = lam;
    theta[table.index_of("eta~~eta").unwrap()] = tau;
    theta[table.index_of("Y1~~Y1").unwrap()] = s1;
    theta[table.index_of("Y2~~Y2").unwrap()] = s2;
    let b = conditional_moments(&table, &theta, &DMatrix::zeros(2, 0), Order::First).unwrap();
    let expect = DMatrix::from_row_slice(2, 2, &[tau + s1, lam * tau, lam * tau, lam * lam * tau + s2]);
    assert!((b.omega - expect).norm() < 1e-14);
}

#[test]
fn loglik_standard_normal_point() {
    let spec = parse_model("Y ~ 0*1").unwrap();
    let table = index_parameters(&spec);
    let theta = DVector::from_element(1, 1.0);
    let b = conditional_moments(&table, &theta, &DMatrix::zeros(1, 0), Order::First).unwrap();
    let ll = log_likelihood(&b, &DMatrix::zeros(1, 1)).unwrap();
    assert!((ll + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
}

#[test]
fn invalid_bundle_is_flagged() {
    let spec = parse_model("Y ~ X").unwrap();
    let table = index_parameters(&spec);
    let theta = DVector::from_vec(vec![0.0, 1.0, -1.0]);
    let b = conditional_moments(&table, &theta, &DMatrix::zeros(3, 1), Order::First).unwrap();
    assert!(!b.valid);
    assert_eq!(log_likelihood(&b, &DMatrix::zeros(3, 1)), Err(MomentError::InvalidOmega));
}

#[test]
fn singular_structural_is_error() {
    let spec = parse_model("Y1 ~ eta1; Y2 ~ eta2; eta2 ~ b*eta1; eta1 ~ c*eta2").unwrap();
    let table = index_parameters(&spec);
    let mut theta = table.start_values();
    theta[table.index_of("b").unwrap()] = 1.0;
    theta[table.index_of("c").unwrap()] = 1.0;
    let err = conditional_moments(&table, &theta, &DMatrix::zeros(2, 0), Order::First).unwrap_err();
    assert_eq!(err, MomentError::SingularStructural);
}
