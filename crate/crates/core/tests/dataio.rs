mod common;

use common::*;
use ndarray::Array2;
use prefnet::dataio::{self, Attribute, AttributeSchema, ConjointDataset, Covariates, Selection};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn randomization_null_correlations_stay_small() {
    let (m, t, p, p_z) = (2000, 5, 2, 2);
    let mut all = Vec::new();
    for rep in 0..100u64 {
        let mut g = rng(1000 + rep);
        let n = m * t;
        let dx = Array2::from_shape_fn((n, p), |_| if g.random_bool(0.5) { 1.0 } else { -1.0 });
        let y = (0..n)
            .map(|_| if g.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let z = normal_z(&mut g, m, p_z);
        let ds = ConjointDataset::from_differences(
            AttributeSchema::binary(p),
            (0..m).map(|i| i.to_string()).collect(),
            Covariates {
                names: vec!["u".into(), "v".into()],
                values: z,
            },
            (0..n).map(|r| r / t).collect(),
            (0..n).map(|r| (r % t).to_string()).collect(),
            dx,
            y,
        )
        .unwrap();
        let report = dataio::randomization_check(&ds, dataio::DEFAULT_RANDOMIZATION_THRESHOLD);
        all.extend(report.entries.iter().map(|e| e.abs_correlation));
    }
    all.sort_by(f64::total_cmp);
    let q99 = all[(0.99 * (all.len() - 1) as f64).round() as usize];
    assert!(q99 < 0.05, "99th percentile of |corr| = {q99:.4}");
}

#[test]
fn long_format_round_trip() {
    let schema = AttributeSchema::new(vec![
        Attribute::categorical("party", &["left", "centre", "right"], 1),
        Attribute::categorical("gender", &["male", "female"], 0),
    ])
    .unwrap();
    let mut g = rng(5);
    let z = normal_z(&mut g, 30, 2);
    let (ds, _) = simulate(&schema, &z, 4, 6, |z| vec![z[0], -0.3, 0.8]);
    let dir = tempfile::tempdir().unwrap();
    let (pp, cp, sp) = (
        dir.path().join("p.csv"),
        dir.path().join("c.csv"),
        dir.path().join("s.toml"),
    );
    ds.write_long(&pp, &cp).unwrap();
    std::fs::write(&sp, schema.to_toml()).unwrap();
    let schema2 = AttributeSchema::from_path(&sp).unwrap();
    assert_eq!(schema2, schema);
    let back = dataio::load_dataset(&pp, &cp, &schema2).unwrap();
    assert_eq!(back.respondent_ids(), ds.respondent_ids());
    assert_eq!(back.delta_x(), ds.delta_x());
    assert_eq!(back.y(), ds.y());
    for (a, b) in back.z().iter().zip(ds.z().iter()) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn schema_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec(2usize..5, 1..5).prop_flat_map(|levels| {
        let refs = levels.iter().map(|&l| 0..l).collect::<Vec<_>>();
        (Just(levels), refs)
    })
}

proptest! {
    #[test]
    fn encode_then_decode_is_identity((levels, refs) in schema_strategy(), picks in prop::collection::vec(0usize..100, 5)) {
        let attrs: Vec<Attribute> = levels
            .iter()
            .zip(&refs)
            .enumerate()
            .map(|(a, (&l, &r))| {
                let names: Vec<String> = (0..l).map(|i| format!("v{i}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                Attribute::categorical(&format!("a{a}"), &refs, r)
            })
            .collect();
        let schema = AttributeSchema::new(attrs).unwrap();
        let sel: Vec<Selection> = levels.iter().zip(&picks).map(|(&l, &p)| Selection::Level(p % l)).collect();
        let x = schema.encode_profile(&sel).unwrap();
        prop_assert_eq!(x.len(), levels.iter().sum::<usize>() - levels.len());
        prop_assert!(x.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(schema.decode_profile(&x).unwrap(), sel);
    }

    #[test]
    fn swapping_profiles_negates_the_difference(seed in 0u64..1000) {
        let schema = AttributeSchema::with_levels(&[2, 3, 4]);
        let mut g = rng(seed);
        let z = normal_z(&mut g, 3, 1);
        let (ds, _) = simulate(&schema, &z, 2, seed, |_| vec![0.0; 6]);
        let profiles = ds.profiles().unwrap();
        for r in 0..ds.n_rows() {
            for k in 0..6 {
                let d = profiles[[2 * r, k]] - profiles[[2 * r + 1, k]];
                prop_assert_eq!(ds.delta_x()[[r, k]], d);
            }
        }
    }
}
