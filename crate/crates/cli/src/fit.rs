use std::path::{Path, PathBuf};

use log::{info, warn};
use prefnet::dataio::{self, AttributeSchema, ConjointDataset};
use prefnet::quantities::write_table;
use prefnet::{crossfit, dml, FoldPlan};

use crate::config::FitConfig;
use crate::error::CliError;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{FitArgs, Threads};

pub const PREFERENCES_FILE: &str = "preferences.csv";

fn resolve(args: &FitArgs) -> Result<FitConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => FitConfig::from_path(path)?,
        None => FitConfig::default(),
    };
    if let Some(p) = &args.data {
        cfg.data.profiles = Some(p.clone());
    }
    if let Some(p) = &args.covariates {
        cfg.data.covariates = Some(p.clone());
    }
    if let Some(p) = &args.schema {
        cfg.data.schema = Some(p.clone());
    }
    cfg.data.differenced |= args.differenced;
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(e) = args.epochs {
        cfg.network.epochs = e;
    }
    if let Some(h) = &args.hidden {
        cfg.network.hidden_sizes = h.clone();
    }
    if let Some(lr) = args.lr {
        cfg.network.learning_rate = lr;
    }
    if let Some(l2) = args.l2 {
        cfg.network.l2_penalty = l2;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.ridge {
        cfg.dml.ridge = r;
    }
    if args.ridge_absolute {
        cfg.dml.ridge_kind = crate::config::RidgeKind::Absolute;
    }
    if args.centered {
        cfg.dml.variance = dml::ClusterVariance::Centered;
    }
    cfg.network.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Load the schema and dataset named by a resolved config.
pub fn load_data(cfg: &FitConfig) -> Result<(AttributeSchema, ConjointDataset), CliError> {
    let (Some(profiles), Some(covariates), Some(schema_path)) =
        (&cfg.data.profiles, &cfg.data.covariates, &cfg.data.schema)
    else {
        return Err(CliError::usage(
            "data, covariates and schema paths are required",
        ));
    };
    let schema = AttributeSchema::from_path(schema_path)?;
    let ds = if cfg.data.differenced {
        dataio::load_differenced(profiles, covariates, &schema)?
    } else {
        dataio::load_dataset(profiles, covariates, &schema)?
    };
    Ok((schema, ds))
}

pub fn input_paths(cfg: &FitConfig) -> Vec<PathBuf> {
    [&cfg.data.profiles, &cfg.data.covariates, &cfg.data.schema]
        .into_iter()
        .flatten()
        .cloned()
        .collect()
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn run(args: &FitArgs, threads: &Threads) -> Result<(), CliError> {
    let cfg = resolve(args)?;
    let out = &args.out;
    create_dir(out)?;
    let mut manifest = RunManifest::new(
        "fit",
        threads.count,
        serde_json::to_value(&cfg).expect("config serializes"),
    );
    manifest.seeds.insert("master".into(), cfg.seed);
    manifest.seeds.insert("fold_plan".into(), cfg.seed);
    for f in 0..cfg.k {
        manifest
            .seeds
            .insert(format!("fold_{f:02}"), cfg.seed.wrapping_add(f as u64));
    }
    for p in input_paths(&cfg) {
        manifest.input(&p)?;
    }

    let (_, ds) = manifest.stage("load", || load_data(&cfg))?;
    info!("loaded {}", ds.summary());
    for name in ds.dropped_covariates() {
        warn!("covariate `{name}` is constant and was dropped");
    }
    let randomization = dataio::randomization_check(&ds, dataio::DEFAULT_RANDOMIZATION_THRESHOLD);
    for e in randomization.flagged() {
        warn!(
            "design column `{}` correlates with covariate `{}` (|r| = {:.3})",
            e.column, e.covariate, e.abs_correlation
        );
    }

    let plan = FoldPlan::new(ds.n_respondents(), cfg.k, cfg.seed)?;
    let pm = manifest.stage("cross_fit", || {
        crossfit::cross_fit(&ds, &cfg.network, &plan, threads.exec)
    })?;
    let fit = manifest.stage("dml", || {
        dml::run(pm.beta.view(), &ds, &cfg.dml.options(), threads.exec)
    })?;

    let mut files = Vec::new();
    let path = out.join(PREFERENCES_FILE);
    pm.write_csv(&path, &ds)?;
    files.push(path);
    let path = out.join("estimate.csv");
    fit.estimate.write_csv(&path)?;
    files.push(path);
    let path = out.join("estimate.json");
    fit.estimate.write_json(&path)?;
    files.push(path);
    files.extend(pm.write_nets(&out.join("nets"), &ds, &cfg.network)?);
    let path = out.join("loss_history.csv");
    write_loss_history(&path, &pm.loss_histories)?;
    files.push(path);
    let path = out.join("randomization.csv");
    write_randomization(&path, &randomization)?;
    files.push(path);

    let est = &fit.estimate;
    let means = pm.column_means();
    for (k, name) in est.columns.iter().enumerate() {
        if (est.theta[k] - means[k]).abs() > 2.0 * est.se_clustered[k] {
            warn!(
                "{name}: debiasing moved the estimate by {:.3} (> 2 standard errors); \
                 check the first-stage fit (--epochs, --l2)",
                est.theta[k] - means[k]
            );
        }
        info!(
            "{name}: theta = {:.4} (se {:.4}, 95% CI [{:.4}, {:.4}])",
            est.theta[k], est.se_clustered[k], est.ci_lower[k], est.ci_upper[k]
        );
    }
    manifest.finish(out, MANIFEST_FILE, &files)?;
    Ok(())
}

fn write_loss_history(path: &Path, histories: &[Vec<f64>]) -> Result<(), CliError> {
    let rows = histories.iter().enumerate().flat_map(|(f, h)| {
        h.iter()
            .enumerate()
            .map(move |(e, l)| vec![f.to_string(), e.to_string(), l.to_string()])
    });
    Ok(write_table(path, &["fold", "epoch", "loss"], rows)?)
}

fn write_randomization(path: &Path, report: &dataio::RandomizationReport) -> Result<(), CliError> {
    let rows = report.entries.iter().map(|e| {
        vec![
            e.column.clone(),
            e.covariate.clone(),
            e.abs_correlation.to_string(),
            e.flagged.to_string(),
        ]
    });
    Ok(write_table(
        path,
        &["column", "covariate", "abs_correlation", "flagged"],
        rows,
    )?)
}

/// Artifacts of a completed fit, reloaded for downstream commands.
pub struct FittedRun {
    pub config: FitConfig,
    pub schema: AttributeSchema,
    pub ds: ConjointDataset,
    pub pm: prefnet::PreferenceMatrix,
    pub manifest: RunManifest,
}

pub fn load_run(out: &Path) -> Result<FittedRun, CliError> {
    let manifest = RunManifest::load(&out.join(MANIFEST_FILE))?;
    if manifest.command != "fit" {
        return Err(CliError::Artifact(format!(
            "{} was written by `{}`, not `fit`",
            out.join(MANIFEST_FILE).display(),
            manifest.command
        )));
    }
    let config: FitConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| CliError::Artifact(format!("manifest config: {e}")))?;
    for input in &manifest.inputs {
        match crate::manifest::sha256_file(&input.path) {
            Ok((sha, _)) if sha == input.sha256 => {}
            Ok(_) => warn!("{} changed since the fit", input.path.display()),
            Err(_) => return Err(CliError::MissingArtifact(input.path.clone())),
        }
    }
    let pref_path = out.join(PREFERENCES_FILE);
    if !pref_path.exists() {
        return Err(CliError::MissingArtifact(pref_path));
    }
    let (schema, ds) = load_data(&config)?;
    let pm = prefnet::PreferenceMatrix::read_csv(&pref_path, &ds)
        .map_err(|e| CliError::Artifact(format!("{}: {e}", pref_path.display())))?;
    Ok(FittedRun {
        config,
        schema,
        ds,
        pm,
        manifest,
    })
}
