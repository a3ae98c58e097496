mod common;

use common::*;
use ndarray::Array2;
use prefnet::dataio::AttributeSchema;
use prefnet::dml::{self, ClusterVariance, Correction, DmlOptions, DEFAULT_PROBE_GRID};
use prefnet::{baseline, Exec};

fn smooth(z: &[f64]) -> Vec<f64> {
    vec![0.5 + 0.5 * z[0].tanh(), -0.4 + 0.3 * z[1], 0.3]
}

#[test]
fn debiased_estimate_is_first_order_insensitive() {
    let m = 5000;
    let schema = AttributeSchema::binary(3);
    let z = normal_z(&mut rng(3), m, 2);
    let (ds, truth) = simulate(&schema, &z, 4, 9, smooth);
    let h = Array2::from_shape_fn((m, 3), |(i, k)| 0.1 * (1.0 + 0.5 * z[[i, k % 2]]));
    let opts = DmlOptions::default();
    let probe = dml::orthogonality_probe(
        truth.view(),
        &ds,
        h.view(),
        &DEFAULT_PROBE_GRID,
        &opts,
        Exec::available(),
    )
    .unwrap();
    let mean_h: Vec<f64> = (0..3).map(|k| mean(&h.column(k).to_vec())).collect();
    for k in 0..3 {
        let bound = 0.05 * (probe.quadratic[k] * 0.05).abs() + 1e-3;
        assert!(
            probe.linear[k].abs() < bound,
            "column {k}: linear {:.2e} ≥ {bound:.2e}",
            probe.linear[k]
        );
        // the plug-in average moves one-for-one with the perturbation
        assert!((probe.plug_in_linear[k] - mean_h[k]).abs() < 1e-6);
        assert!(probe.plug_in_linear[k].abs() > 50.0 * probe.linear[k].abs());
    }
}

#[test]
fn true_beta_homogeneous_matches_logit_and_its_se() {
    let schema = AttributeSchema::binary(4);
    let beta0 = vec![0.7, -0.4, 0.2, 1.0];
    let z = normal_z(&mut rng(4), 3000, 2);
    let (ds, truth) = simulate(&schema, &z, 5, 41, |_| beta0.clone());
    let fit = dml::run(truth.view(), &ds, &DmlOptions::default(), Exec::available()).unwrap();
    let logit = baseline::fit_logit(&ds, None).unwrap();
    for k in 0..4 {
        let diff = fit.estimate.theta[k] - logit.coef[k];
        assert!(
            diff.abs() < 0.5 * logit.se_clustered[k],
            "column {k}: θ̂ {} vs logit {}",
            fit.estimate.theta[k],
            logit.coef[k]
        );
        let ratio = fit.estimate.se_clustered[k] / logit.se_clustered[k];
        assert!(
            (0.8..1.25).contains(&ratio),
            "column {k}: SE ratio {ratio:.3}"
        );
    }
}

#[test]
fn plug_in_with_truth_recovers_sample_mean() {
    let schema = AttributeSchema::binary(3);
    let z = normal_z(&mut rng(5), 400, 2);
    let (ds, truth) = simulate(&schema, &z, 3, 51, smooth);
    let opts = DmlOptions {
        correction: Correction::PlugIn,
        variance: ClusterVariance::Centered,
        ..Default::default()
    };
    let fit = dml::run(truth.view(), &ds, &opts, Exec::available()).unwrap();
    for k in 0..3 {
        // equal task counts make the row-weighted mean the respondent mean
        let want = mean(&truth.column(k).to_vec());
        assert!((fit.estimate.theta[k] - want).abs() < 1e-12);
    }
}

#[test]
fn sequential_and_parallel_estimates_are_identical() {
    let schema = AttributeSchema::binary(3);
    let z = normal_z(&mut rng(6), 700, 2);
    let (ds, truth) = simulate(&schema, &z, 5, 61, smooth);
    let opts = DmlOptions::default();
    let a = dml::run(truth.view(), &ds, &opts, Exec::Sequential)
        .unwrap()
        .estimate;
    let b = dml::run(truth.view(), &ds, &opts, Exec::available())
        .unwrap()
        .estimate;
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.se_clustered, b.se_clustered);
}
