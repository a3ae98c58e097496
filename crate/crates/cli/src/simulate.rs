use std::path::{Path, PathBuf};

use prefnet::simulate::{self as sim, FactorialSpec, Preset, SimSpec};
use serde::de::DeserializeOwned;

use crate::error::CliError;
use crate::fit::create_dir;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{SimMode, SimulateArgs, Threads};

fn read_spec<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn run(args: &SimulateArgs, threads: &Threads) -> Result<(), CliError> {
    let preset: Preset = args.preset.parse()?;
    create_dir(&args.out)?;
    match args.mode {
        SimMode::Benchmark => {
            let mut spec = match &args.config {
                Some(p) => read_spec(p)?,
                None => SimSpec::preset(preset),
            };
            if let Some(s) = args.seed {
                spec.seed = s;
            }
            if let Some(r) = args.replications {
                spec.replications = r;
            }
            if let Some(k) = args.k {
                spec.folds = k;
            }
            if let Some(e) = args.epochs {
                spec.network.epochs = e;
            }
            benchmark(&spec, args, threads)
        }
        SimMode::Factorial => {
            let mut spec = match &args.config {
                Some(p) => read_spec(p)?,
                None => FactorialSpec::preset(preset),
            };
            if let Some(s) = args.seed {
                spec.seed = s;
            }
            if let Some(r) = args.replications {
                spec.replications = r;
            }
            if let Some(k) = args.k {
                spec.folds = k;
            }
            if let Some(e) = args.epochs {
                spec.network.epochs = e;
            }
            factorial(&spec, args, threads)
        }
    }
}

fn manifest_for(
    command: &str,
    config: serde_json::Value,
    seed: u64,
    args: &SimulateArgs,
    threads: &Threads,
) -> Result<RunManifest, CliError> {
    let mut manifest = RunManifest::new(command, threads.count, config);
    manifest.seeds.insert("master".into(), seed);
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    Ok(manifest)
}

fn benchmark(spec: &SimSpec, args: &SimulateArgs, threads: &Threads) -> Result<(), CliError> {
    spec.validate()?;
    let config = serde_json::to_value(spec).expect("spec serializes");
    let mut manifest = manifest_for("simulate benchmark", config, spec.seed, args, threads)?;
    let report = manifest.stage("benchmark", || sim::run_benchmark(spec, threads.exec))?;
    let t = &report.summary.mean_times;
    for (name, v) in [
        ("mean_generate", t.generate),
        ("mean_cross_fit", t.cross_fit),
        ("mean_dml", t.dml),
        ("mean_logit", t.logit),
        ("mean_quantities", t.quantities),
    ] {
        manifest.stages.push(crate::manifest::Stage {
            name: name.into(),
            seconds: v,
        });
    }
    let out = &args.out;
    let mut files: Vec<PathBuf> = Vec::new();
    let path = out.join("report.csv");
    report.write_csv(&path)?;
    files.push(path);
    let path = out.join("report.json");
    report.write_json(&path)?;
    files.push(path);

    let s = &report.summary;
    let rows = report.columns.iter().enumerate().map(|(k, c)| {
        vec![
            c.clone(),
            s.coverage_dml[k].to_string(),
            s.coverage_plugin[k].to_string(),
            s.coverage_logit[k].to_string(),
            s.mean_se_ratio[k].to_string(),
        ]
    });
    let path = out.join("coverage.csv");
    prefnet::quantities::write_table(
        &path,
        &[
            "level",
            "coverage_dml",
            "coverage_plugin",
            "coverage_logit",
            "mean_se_ratio",
        ],
        rows,
    )?;
    files.push(path);

    println!(
        "replications: {} completed, {} failed",
        s.completed, s.failed
    );
    println!(
        "{:<12} {:>8} {:>8} {:>8}",
        "level", "dml", "plug-in", "logit"
    );
    for (k, c) in report.columns.iter().enumerate() {
        println!(
            "{:<12} {:>8.3} {:>8.3} {:>8.3}",
            c, s.coverage_dml[k], s.coverage_plugin[k], s.coverage_logit[k]
        );
    }
    println!(
        "individual correlation: network {:.3}, logit {:.3}; profile probability MAD {:.4}",
        s.indiv_corr_dnn, s.indiv_corr_logit, s.profile_mad_dnn
    );
    for (r, e) in &report.failures {
        log::warn!("replication {r}: {e}");
    }
    manifest.finish(out, MANIFEST_FILE, &files)?;
    Ok(())
}

fn factorial(spec: &FactorialSpec, args: &SimulateArgs, threads: &Threads) -> Result<(), CliError> {
    spec.validate()?;
    let config = serde_json::to_value(spec).expect("spec serializes");
    let mut manifest = manifest_for("simulate factorial", config, spec.seed, args, threads)?;
    let report = manifest.stage("factorial", || sim::run_factorial(spec, threads.exec))?;
    let out = &args.out;
    let mut files = Vec::new();
    let path = out.join("cells.csv");
    report.write_cells_csv(&path)?;
    files.push(path);
    let path = out.join("min_nt.csv");
    report.write_min_nt_csv(&path)?;
    files.push(path);
    let path = out.join("factorial.json");
    report.write_json(&path)?;
    files.push(path);

    println!("{:>6} {:>3} {:>3} {:>8} {:>8}", "N", "T", "p", "corr", "se");
    for c in &report.cells {
        println!(
            "{:>6} {:>3} {:>3} {:>8.3} {:>8.3}",
            c.n, c.t, c.p, c.mean_correlation, c.se_correlation
        );
    }
    let v = &report.variance_shares;
    println!(
        "variance shares: N {:.2}, T {:.2}, p {:.2}, residual {:.2}; rank violations {}/{}",
        v.n, v.t, v.p, v.residual, report.rank_violations, report.adjacent_pairs
    );
    manifest.finish(out, MANIFEST_FILE, &files)?;
    Ok(())
}
