mod common;

use common::*;
use ndarray::{concatenate, Axis};
use prefnet::baseline;
use prefnet::dataio::AttributeSchema;

#[test]
fn homogeneous_fold_means_match_pooled_logit() {
    let schema = AttributeSchema::binary(3);
    let beta0 = [0.8, -0.5, 0.3];
    let z = normal_z(&mut rng(21), 1000, 3);
    let (ds, _) = simulate(&schema, &z, 5, 22, |_| beta0.to_vec());
    let pm = cross_fit(&ds, 5, 23);
    let logit = baseline::fit_logit(&ds, None).unwrap();
    for (k, (est, mle)) in pm.column_means().iter().zip(&logit.coef).enumerate() {
        assert!(
            (est - mle).abs() < 0.05,
            "column {k}: network {est:.4} vs logit {mle:.4}"
        );
    }
}

#[test]
fn twins_in_different_folds_get_similar_estimates() {
    let schema = AttributeSchema::binary(3);
    let half = normal_z(&mut rng(31), 1000, 2);
    // respondent i and i + 1000 share covariates
    let z = concatenate(Axis(0), &[half.view(), half.view()]).unwrap();
    let (ds, _) = simulate(&schema, &z, 5, 32, |z| {
        vec![
            0.6 + 0.8 * z[0].tanh(),
            -0.4 + 0.6 * (0.8 * z[1]).tanh(),
            0.3 + 0.5 * (z[0] - z[1]).tanh(),
        ]
    });
    assert!(ds.n_rows() >= 10_000);
    let pm = cross_fit(&ds, 5, 33);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..1000 {
        let j = i + 1000;
        if pm.fold_of[i] == pm.fold_of[j] {
            continue;
        }
        a.extend(pm.beta.row(i).iter());
        b.extend(pm.beta.row(j).iter());
    }
    assert!(a.len() > 3 * 600, "too few twins split across folds");
    let r = correlation(&a, &b);
    assert!(r > 0.9, "twin correlation {r:.3}");
}
