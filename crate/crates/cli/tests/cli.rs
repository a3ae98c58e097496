use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn example() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/example")
}

fn prefnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = prefnet(args);
    assert!(
        out.status.success(),
        "prefnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Fast fit of the bundled example into `dir/run`.
fn quick_fit(dir: &Path) -> PathBuf {
    let out = dir.join("run");
    let config = example().join("fit.toml");
    ok(&[
        "--threads",
        "1",
        "fit",
        "--config",
        s(&config),
        "--k",
        "2",
        "--epochs",
        "10",
        "--out",
        s(&out),
    ]);
    out
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    (header, rows)
}

fn files_under(dir: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.insert(path);
        }
    }
    out
}

fn manifest_outputs(path: &Path) -> BTreeSet<PathBuf> {
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let dir = path.parent().unwrap();
    m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| dir.join(o["path"].as_str().unwrap()))
        .collect()
}

#[test]
fn fit_writes_all_artifacts_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let run = quick_fit(dir.path());
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "quick fit took {elapsed:.1}s");
    for f in [
        "preferences.csv",
        "estimate.csv",
        "estimate.json",
        "nets/fold_00.json",
        "nets/fold_01.json",
        "manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let (header, rows) = read_csv(&run.join("preferences.csv"));
    assert_eq!(header.len(), 2 + 5);
    assert_eq!(rows.len(), 200);

    let mut written = files_under(&run);
    written.remove(&run.join("manifest.json"));
    assert_eq!(manifest_outputs(&run.join("manifest.json")), written);
}

#[test]
fn fit_is_reproducible_on_one_thread() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = quick_fit(a.path());
    let rb = quick_fit(b.path());
    for f in ["preferences.csv", "estimate.csv", "nets/fold_01.json"] {
        assert_eq!(
            std::fs::read(ra.join(f)).unwrap(),
            std::fs::read(rb.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn missing_covariates_is_a_load_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let e = example();
    let missing = dir.path().join("no_such_covariates.csv");
    let out = prefnet(&[
        "fit",
        "--data",
        s(&e.join("profiles.csv")),
        "--covariates",
        s(&missing),
        "--schema",
        s(&e.join("schema.toml")),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_covariates.csv"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefnet(&["fit", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = prefnet(&["quantify", "nonsense", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn polarization_rows_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let run = quick_fit(dir.path());
    ok(&[
        "quantify",
        "polarization",
        "--level",
        "all",
        "--out",
        s(&run),
    ]);
    let (header, rows) = read_csv(&run.join("quantities/polarization.csv"));
    assert_eq!(
        header,
        ["level", "frac_positive", "frac_negative", "frac_zero"]
    );
    assert_eq!(rows.len(), 5);
    for r in rows {
        let total: f64 = r[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    assert!(run.join("quantities/polarization.manifest.json").exists());
}

#[test]
fn mrs_has_respondent_rows_and_a_summary_row() {
    let dir = tempfile::tempdir().unwrap();
    let run = quick_fit(dir.path());
    ok(&[
        "quantify",
        "mrs",
        "--num",
        "a0:l1",
        "--den",
        "a2:l1",
        "--out",
        s(&run),
    ]);
    let (header, rows) = read_csv(&run.join("quantities/mrs.csv"));
    assert_eq!(
        header,
        [
            "respondent_id",
            "mrs",
            "median_ratio",
            "ratio_of_means",
            "undefined"
        ]
    );
    assert_eq!(rows.len(), 201);
    let summary = rows.last().unwrap();
    assert_eq!(summary[0], "summary");
    let undefined: usize = summary[4].parse().unwrap();
    let empty = rows[..200].iter().filter(|r| r[1].is_empty()).count();
    assert_eq!(undefined, empty);
    let mean: f64 = summary[1].parse().unwrap();
    let vals: Vec<f64> = rows[..200]
        .iter()
        .filter_map(|r| r[1].parse().ok())
        .collect();
    assert!((mean - vals.iter().sum::<f64>() / vals.len() as f64).abs() < 1e-9);
    summary[3].parse::<f64>().unwrap();
}

#[test]
fn identical_profiles_give_one_half() {
    let dir = tempfile::tempdir().unwrap();
    let run = quick_fit(dir.path());
    let a = example().join("profile_a.json");
    ok(&[
        "quantify",
        "chooseprob",
        "--profile-a",
        s(&a),
        "--profile-b",
        s(&a),
        "--out",
        s(&run),
    ]);
    let (_, rows) = read_csv(&run.join("quantities/chooseprob.csv"));
    assert_eq!(rows.len(), 201);
    for r in &rows {
        assert_eq!(r[1].parse::<f64>().unwrap(), 0.5);
    }
}

#[test]
fn every_quantity_runs_with_groups() {
    let dir = tempfile::tempdir().unwrap();
    let run = quick_fit(dir.path());
    let (a, b) = (
        example().join("profile_a.json"),
        example().join("profile_b.json"),
    );
    let r = s(&run);
    let calls: Vec<Vec<&str>> = vec![
        vec!["ame", "--draws", "2000"],
        vec!["importance", "--by", "z4"],
        vec![
            "compdiff",
            "--penalty",
            "a1:l1",
            "--benefit",
            "max:a0:l1,a2:l1",
            "--by",
            "z4",
        ],
        vec![
            "majority",
            "--profile-a",
            s(&a),
            "--profile-b",
            s(&b),
            "--by",
            "z4",
        ],
        vec![
            "slope",
            "--brackets",
            "a1:l0,a1:l1,a1:l2",
            "--midpoints",
            "10,20,40",
            "--by",
            "z1",
        ],
        vec!["sensitivity", "--set", "a1:l1,a1:l2"],
    ];
    for mut c in calls {
        c.insert(0, "quantify");
        c.extend(["--out", r]);
        ok(&c);
    }
    let (_, rows) = read_csv(&run.join("quantities/ame.csv"));
    assert_eq!(rows.len(), 5);
    let (_, rows) = read_csv(&run.join("quantities/slope_by_z1.csv"));
    assert_eq!(rows.len(), 3);
    let (_, rows) = read_csv(&run.join("quantities/majority.csv"));
    assert_eq!(rows.len(), 3);
}

#[test]
fn quantify_without_a_fit_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefnet(&["quantify", "importance", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(5));
    let out = prefnet(&["validate", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn validate_by_two_groups_emits_two_rows_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let run = quick_fit(dir.path());
    ok(&["validate", "--by", "z4", "--out", s(&run)]);
    let (header, rows) = read_csv(&run.join("validation/comparison.csv"));
    assert_eq!(
        header,
        ["group", "level", "dnn_mean", "logit_coef", "abs_diff"]
    );
    assert_eq!(rows.len(), 2 * 5);
    let mut written = files_under(&run.join("validation"));
    written.remove(&run.join("validation/manifest.json"));
    assert_eq!(
        manifest_outputs(&run.join("validation/manifest.json")),
        written
    );
}

#[test]
fn validate_homogeneous_example_agrees_with_the_logit() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let config = example().join("fit.toml");
    ok(&["fit", "--config", s(&config), "--out", s(&run)]);
    ok(&["validate", "--out", s(&run)]);
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run.join("validation/summary.json")).unwrap(),
    )
    .unwrap();
    let r = summary["correlation"].as_f64().unwrap();
    assert!(r >= 0.99, "correlation {r}");
}

#[test]
fn factorial_tiny_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut digests = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        ok(&[
            "--threads",
            "1",
            "simulate",
            "--mode",
            "factorial",
            "--preset",
            "tiny",
            "--out",
            s(&out),
        ]);
        let (_, rows) = read_csv(&out.join("cells.csv"));
        assert_eq!(rows.len(), 4);
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        let d: Vec<String> = m["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|o| o["sha256"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(d.len(), 3);
        digests.push(d);
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn benchmark_reports_coverage_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let stdout = ok(&[
        "simulate",
        "--mode",
        "benchmark",
        "--preset",
        "tiny",
        "--out",
        s(&out),
    ])
    .stdout;
    let (header, rows) = read_csv(&out.join("coverage.csv"));
    assert_eq!(header[0], "level");
    assert_eq!(rows.len(), 3);
    assert!(String::from_utf8_lossy(&stdout).contains("2 completed"));
}

#[test]
fn bad_preset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefnet(&["simulate", "--preset", "huge", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn desk_benchmark_preset_completes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("desk");
    ok(&[
        "simulate",
        "--mode",
        "benchmark",
        "--preset",
        "desk",
        "--out",
        s(&out),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["completed"].as_u64(), Some(20));
    let (_, rows) = read_csv(&out.join("coverage.csv"));
    assert_eq!(rows.len(), 5);
}
