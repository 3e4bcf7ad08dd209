mod common;

use common::{rng, study_fit};
use lvm_infer_core::inference::{prepare, robust_vcov, InferenceContext};
use lvm_infer_core::moments::score;
use lvm_infer_core::{ClusterIndex, Correction, CorrectionOptions, InferenceError};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn f_test_with_one_row_is_squared_wald() {
    let f = study_fit("A", 30, 0);
    let p = f.table.p();
    let mut r = rng(31);
    for corr in Correction::ALL {
        let prep = prepare(&f, corr, &CorrectionOptions::default()).unwrap();
        let ctx = InferenceContext::new(prep.source(), corr, None).unwrap();
        for _ in 0..20 {
            let c = DVector::from_fn(p, |_, _| r.random_range(-1.0..1.0));
            let null = r.random_range(-0.5..0.5);
            let w = ctx.wald(&c, null).unwrap();
            let ft = ctx
                .f_test(&DMatrix::from_row_slice(1, p, c.as_slice()), &DVector::from_element(1, null))
                .unwrap();
            assert!(close(ft.statistic, w.statistic * w.statistic, 1e-10));
            assert!(close(ft.df2, w.df, 1e-10), "{corr}: {} vs {}", ft.df2, w.df);
            assert!(close(ft.p_value, w.p_value, 1e-10), "{corr}: {} vs {}", ft.p_value, w.p_value);
        }
    }
}

#[test]
fn wald_is_invariant_to_contrast_scale() {
    let f = study_fit("B", 25, 0);
    let p = f.table.p();
    let mut r = rng(32);
    let prep = prepare(&f, Correction::FullWithNeff, &CorrectionOptions::default()).unwrap();
    let ctx = InferenceContext::new(prep.source(), Correction::FullWithNeff, None).unwrap();
    for _ in 0..10 {
        let c = DVector::from_fn(p, |_, _| r.random_range(-1.0..1.0));
        let a = r.random_range(0.1..10.0);
        let w1 = ctx.wald(&c, 0.3).unwrap();
        let w2 = ctx.wald(&(&c * a), 0.3 * a).unwrap();
        assert!(close(w1.statistic, w2.statistic, 1e-12));
        assert!(close(w1.df, w2.df, 1e-12));
        assert!(close(w1.p_value, w2.p_value, 1e-12));
    }
}

#[test]
fn uncorrected_test_is_asymptotic() {
    let f = study_fit("A", 40, 0);
    let ctx = InferenceContext::new(&f, Correction::None, None).unwrap();
    let mut c = DVector::zeros(f.table.p());
    c[f.table.index_of("gamma1").unwrap()] = 1.0;
    let w = ctx.wald(&c, 0.0).unwrap();
    assert!(w.df.is_infinite());
    let expect = lvm_infer_core::dist::t_two_sided(w.statistic, f64::INFINITY).unwrap();
    assert_eq!(w.p_value, expect);
    assert!((w.se - f.vcov[(c.argmax().0, c.argmax().0)].sqrt()).abs() < 1e-15);
}

#[test]
fn robust_pair_cluster_adds_cross_scores() {
    let f = study_fit("A", 30, 0);
    let single = ClusterIndex::singletons(30);
    let mut ids: Vec<usize> = (0..30).collect();
    ids[5] = 2;
    let paired = ClusterIndex::new(&ids);
    assert_eq!(paired.g, 29);
    let v1 = robust_vcov(&f, &single).unwrap();
    let v2 = robust_vcov(&f, &paired).unwrap();
    let s = score(&f.bundle, &f.data.y).unwrap().individual;
    let (a, b) = (s.row(2).transpose(), s.row(5).transpose());
    let cross = &a * b.transpose() + &b * a.transpose();
    let expect = &f.vcov * cross * &f.vcov;
    assert!((v2 - v1 - &expect).amax() < 1e-10 * expect.amax().max(1e-3));
}

#[test]
fn robust_needs_two_clusters() {
    let f = study_fit("A", 20, 0);
    let one = ClusterIndex::new(&vec![0u8; 20]);
    assert!(matches!(robust_vcov(&f, &one), Err(InferenceError::TooFewClusters(1))));
    let short = ClusterIndex::singletons(5);
    assert!(robust_vcov(&f, &short).is_err());
}

#[test]
fn robust_close_to_model_based_at_large_n() {
    let f = study_fit("A", 1000, 0);
    let v = robust_vcov(&f, &ClusterIndex::singletons(1000)).unwrap();
    for k in 0..f.table.p() {
        let ratio = (v[(k, k)] / f.vcov[(k, k)]).sqrt();
        assert!((ratio - 1.0).abs() < 0.15, "{}: {ratio}", f.table.params[k].label);
    }
}

#[test]
fn robust_df_copies_model_df() {
    let f = study_fit("B", 25, 0);
    let prep = prepare(&f, Correction::FullWithNeff, &CorrectionOptions::default()).unwrap();
    let clusters = ClusterIndex::singletons(25);
    let plain = InferenceContext::new(prep.source(), Correction::FullWithNeff, None).unwrap();
    let rob = InferenceContext::new(prep.source(), Correction::FullWithNeff, Some(&clusters)).unwrap();
    let mut c = DVector::zeros(f.table.p());
    c[f.table.index_of("k1").unwrap()] = 1.0;
    let (a, b) = (plain.wald(&c, 0.0).unwrap(), rob.wald(&c, 0.0).unwrap());
    assert_eq!(a.df, b.df);
    assert!(b.robust && !a.robust);
    assert_ne!(a.se, b.se);
}

#[test]
fn f_test_rejects_dependent_contrasts() {
    let f = study_fit("A", 30, 0);
    let ctx = InferenceContext::new(&f, Correction::Satterthwaite, None).unwrap();
    let p = f.table.p();
    let mut cm = DMatrix::zeros(2, p);
    cm[(0, 0)] = 1.0;
    cm[(1, 0)] = 2.0;
    assert!(matches!(ctx.f_test(&cm, &DVector::zeros(2)), Err(InferenceError::RankDeficient)));
}

#[test]
fn multivariate_df_combines_per_contrast_df() {
    let f = study_fit("C", 40, 0);
    let prep = prepare(&f, Correction::FullWithNeff, &CorrectionOptions::default()).unwrap();
    let src = prep.source();
    let ctx = InferenceContext::new(src, Correction::FullWithNeff, None).unwrap();
    let (cm, r) = lvm_infer_core::inference::parse_contrasts(src.table(), "k1 = 0, gamma1 = 0, b1 = 0").unwrap();
    let ft = ctx.f_test(&cm, &r).unwrap();
    assert_eq!(ft.q, 3);
    let s: f64 = ft.per_contrast_df.iter().map(|v| v / (v - 2.0)).sum();
    assert!((ft.df2 - 2.0 * s / (s - 3.0)).abs() < 1e-10);
    // The statistic is invariant to the eigen-rotation of the contrasts.
    let diff = &cm * src.theta() - &r;
    let direct = diff.dot(&((&cm * src.vcov() * cm.transpose()).try_inverse().unwrap() * &diff)) / 3.0;
    assert!((ft.statistic - direct).abs() < 1e-10 * direct.max(1.0));
}

mod unit {
    use lvm_infer_core::inference::*;
    use lvm_infer_core::model_spec::{index_parameters, parse_model};

    #[test]
    fn contrast_parsing() {
        let table = index_parameters(&parse_model("Y ~ b1*X1 + b2*X2").unwrap());
        let (c, r) = parse_contrasts(&table, "b1=0, 2*b2 - b1 = 1.5").unwrap();
        assert_eq!(c.nrows(), 2);
        let i1 = table.index_of("b1").unwrap();
        let i2 = table.index_of("b2").unwrap();
        assert_eq!(c[(0, i1)], 1.0);
        assert_eq!(c[(1, i2)], 2.0);
        assert_eq!(c[(1, i1)], -1.0);
        assert_eq!(r[1], 1.5);
        let (c, _) = parse_contrasts(&table, "Y~1").unwrap();
        assert_eq!(c[(0, table.index_of("Y~1").unwrap())], 1.0);
        assert!(parse_contrasts(&table, "zz = 0").is_err());
        assert!(parse_contrasts(&table, "1 = 0").is_err());
    }

    #[test]
    fn correction_names_roundtrip() {
        for c in Correction::ALL {
            assert_eq!(c.name().parse::<Correction>().unwrap(), c);
        }
        assert!("fancy".parse::<Correction>().is_err());
    }

    #[test]
    fn cluster_index_numbering() {
        let c = ClusterIndex::new(&["b", "a", "b", "c"]);
        assert_eq!(c.assignment, vec![0, 1, 0, 2]);
        assert_eq!(c.g, 3);
    }
}
