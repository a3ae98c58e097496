use log::info;
use prefnet::baseline;
use prefnet::quantities::Bins;

use crate::error::CliError;
use crate::fit::{create_dir, load_run, PREFERENCES_FILE};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{Threads, ValidateArgs};

pub fn run(args: &ValidateArgs, threads: &Threads) -> Result<(), CliError> {
    let fitted = load_run(&args.out)?;
    let dir = args.out.join("validation");
    create_dir(&dir)?;
    let mut manifest = RunManifest::new(
        "validate",
        threads.count,
        serde_json::json!({ "by": args.by }),
    );
    for input in &fitted.manifest.inputs {
        manifest.input(&input.path)?;
    }
    manifest.input(&args.out.join(PREFERENCES_FILE))?;
    let bins = match &args.by {
        Some(cov) => Some(Bins::by_covariate(&fitted.ds, cov)?),
        None => None,
    };
    let report = manifest.stage("logit", || {
        baseline::validate_averages(&fitted.pm, &fitted.ds, bins.as_ref(), threads.exec)
    })?;
    for g in &report.groups {
        info!(
            "{}: {} rows, correlation {:.4}, mean abs diff {:.4}",
            g.group, g.n_rows, g.correlation, g.mad
        );
    }
    for s in &report.skipped {
        log::warn!("group {} skipped: {}", s.group, s.reason);
    }
    let csv = dir.join("comparison.csv");
    report.write_csv(&csv)?;
    let json = dir.join("summary.json");
    report.write_json(&json)?;
    manifest.finish(&dir, MANIFEST_FILE, &[csv, json])?;
    Ok(())
}
