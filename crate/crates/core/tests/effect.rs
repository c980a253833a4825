use cdti_core::effect::*;
use cdti_core::error::Error;
use cdti_core::gaussmath::GaussianJoint;
use cdti_core::scm::{GaussianScm, GaussianScmSpec, OutcomeModel, OutcomeScm, StandInConfig, StandInScm};
use cdti_core::Dataset;
use nalgebra::{DMatrix, DVector};

fn null_scm() -> GaussianScm {
    let joint = GaussianJoint::new(DVector::zeros(4), DMatrix::identity(4, 4), 2, 2).unwrap();
    GaussianScm::new(GaussianScmSpec {
        joint,
        alpha: -0.5,
        beta: vec![0.0; 2],
        gamma: vec![0.0; 2],
        outcome: OutcomeModel { alpha: -0.3, beta: vec![0.5, -0.2], gamma: vec![0.4, 0.1], effect: 0.0 },
    })
    .unwrap()
}

#[test]
fn null_model_covers_zero() {
    let scm = null_scm();
    let ds = scm.simulate(8000, 1).unwrap();
    let e = estimate_ett(&ds, &ds.z_names.clone(), DEFAULT_BOOTSTRAP_REPS, 2).unwrap();
    assert!(e.covers(0.0), "{e:?}");
    assert!(e.ci_lo <= e.estimate && e.estimate <= e.ci_hi);
    let t = true_ett(&scm, 20_000, 3).unwrap();
    assert_eq!(t.value, 0.0);
}

/// With one binary covariate the untreated fit reproduces the cell means, so the
/// estimate is a weighted sum of cell contrasts.
#[test]
fn saturated_covariate_matches_cell_means() {
    let z: Vec<f64> = (0..40).map(|i| (i % 2) as f64).collect();
    let x: Vec<u8> = (0..40).map(|i| ((i / 2) % 2) as u8).collect();
    let y: Vec<u8> = (0..40).map(|i| ((i * 7 + i / 3) % 3 == 0) as u8).collect();
    let ds = Dataset::new(DMatrix::from_vec(40, 1, z.clone()), vec!["Z1".into()], x.clone(), y.clone(), None, "t").unwrap();
    let cell = |c: f64| {
        let idx: Vec<usize> = (0..40).filter(|&i| x[i] == 0 && z[i] == c).collect();
        idx.iter().map(|&i| y[i] as f64).sum::<f64>() / idx.len() as f64
    };
    let treated: Vec<usize> = (0..40).filter(|&i| x[i] == 1).collect();
    let oracle = treated.iter().map(|&i| y[i] as f64 - cell(z[i])).sum::<f64>() / treated.len() as f64;
    let e = estimate_ett(&ds, &["Z1".to_string()], 20, 0).unwrap();
    assert!((e.estimate - oracle).abs() < 1e-6, "{} vs {oracle}", e.estimate);
}

#[test]
fn stand_in_bias_and_correction() {
    let scm = StandInScm::new(StandInConfig::default(), 0);
    let ds = scm.simulate(20_000, 7).unwrap();
    let truth = true_ett(&scm, 200_000, 8).unwrap();
    assert!(truth.value < 0.0);
    let z_only = estimate_ett(&ds, &ds.z_names.clone(), DEFAULT_BOOTSTRAP_REPS, 9).unwrap();
    assert!(z_only.ci_lo > truth.value + 3.0 * truth.se, "{z_only:?} vs {truth:?}");
    let all: Vec<String> = ds.z_names.iter().chain(&ds.u_names).cloned().collect();
    let full = estimate_ett(&ds, &all, DEFAULT_BOOTSTRAP_REPS, 9).unwrap();
    assert!(full.covers(truth.value), "{full:?} vs {truth:?}");
}

#[test]
fn true_ett_se_scales_with_n() {
    let scm = StandInScm::new(StandInConfig::default(), 0);
    let a = true_ett(&scm, 20_000, 1).unwrap();
    let b = true_ett(&scm, 80_000, 2).unwrap();
    assert!((a.se / b.se - 2.0).abs() < 0.15, "{} {}", a.se, b.se);
    assert!((a.value - b.value).abs() < 3.0 * (a.se.powi(2) + b.se.powi(2)).sqrt());
}

#[test]
fn errors() {
    let ds = Dataset::new(DMatrix::zeros(4, 1), vec!["Z1".into()], vec![1; 4], vec![0, 1, 0, 1], None, "t").unwrap();
    assert_eq!(estimate_ett(&ds, &[], 10, 0).unwrap_err(), Error::EmptyArm(0));
    let ds = Dataset::new(DMatrix::zeros(4, 1), vec!["Z1".into()], vec![1, 0, 1, 0], vec![0, 1, 0, 1], None, "t").unwrap();
    assert!(matches!(estimate_ett(&ds, &["nope".to_string()], 10, 0), Err(Error::UnknownColumn(_))));
}

#[test]
fn nested_adjustment_moves_toward_truth() {
    let scm = StandInScm::new(StandInConfig::default(), 0);
    let truth = true_ett(&scm, 200_000, 11).unwrap().value;
    let names = scm.simulate(10, 0).unwrap();
    let z = names.z_names.clone();
    let half: Vec<String> = z.iter().chain(&names.u_names[..names.u_names.len() / 2]).cloned().collect();
    let full: Vec<String> = z.iter().chain(&names.u_names).cloned().collect();
    // Bias averaged over datasets; a single draw has sampling error comparable to the half-set bias.
    let sets = [z, half, full];
    let mut bias = [0.0; 3];
    for s in 0..6 {
        let ds = scm.simulate(20_000, 40 + s).unwrap();
        for (b, a) in bias.iter_mut().zip(&sets) {
            *b += (estimate_ett(&ds, a, 2, 0).unwrap().estimate - truth) / 6.0;
        }
    }
    assert!(bias[0] > bias[1] && bias[1] > bias[2].abs(), "{bias:?}");
}

#[test]
fn full_adjustment_converges_to_oracle() {
    let scm = StandInScm::new(StandInConfig::default(), 0);
    let truth = true_ett(&scm, 400_000, 21).unwrap().value;
    let all: Vec<String> = {
        let d = scm.simulate(10, 0).unwrap();
        d.z_names.iter().chain(&d.u_names).cloned().collect()
    };
    // Mean absolute error over a few datasets, so the comparison is about the rate and not one draw.
    let mae = |n: usize| -> f64 {
        (0..4).map(|s| (estimate_ett(&scm.simulate(n, 100 + s).unwrap(), &all, 2, 0).unwrap().estimate - truth).abs()).sum::<f64>() / 4.0
    };
    assert!(mae(40_000) < mae(10_000));
    let big = estimate_ett(&scm.simulate(40_000, 30).unwrap(), &all, DEFAULT_BOOTSTRAP_REPS, 1).unwrap();
    assert!(big.covers(truth), "{big:?} vs {truth}");
}
