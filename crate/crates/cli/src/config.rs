//! Fit configuration: a TOML file whose keys can be overridden by flags.
//!
//! ```toml
//! seed = 7
//! k = 10
//!
//! [data]
//! profiles = "profiles.csv"      # relative to this file
//! covariates = "covariates.csv"
//! schema = "schema.toml"
//! differenced = false
//!
//! [network]
//! hidden_sizes = [32, 32, 16]
//! epochs = 150
//! learning_rate = 0.01
//! l2_penalty = 0.001
//!
//! [dml]
//! ridge = 1e-6
//! ridge_kind = "relative"        # or "absolute"
//! lambda_mode = "pooled"         # or "own_rows"
//! variance = "uncentered"        # or "centered"
//! ```

use std::path::{Path, PathBuf};

use prefnet::dml::{ClusterVariance, DmlOptions, LambdaMode, Ridge};
use prefnet::net::NetworkConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub profiles: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    /// Profiles file holds one pre-differenced row per task.
    pub differenced: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RidgeKind {
    #[default]
    Relative,
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmlSection {
    pub ridge: f64,
    pub ridge_kind: RidgeKind,
    pub lambda_mode: LambdaMode,
    pub variance: ClusterVariance,
}

impl Default for DmlSection {
    fn default() -> Self {
        DmlSection {
            ridge: 1e-6,
            ridge_kind: RidgeKind::Relative,
            lambda_mode: LambdaMode::Pooled,
            variance: ClusterVariance::Uncentered,
        }
    }
}

impl DmlSection {
    pub fn options(&self) -> DmlOptions {
        DmlOptions {
            ridge: match self.ridge_kind {
                RidgeKind::Relative => Ridge::Relative(self.ridge),
                RidgeKind::Absolute => Ridge::Absolute(self.ridge),
            },
            lambda_mode: self.lambda_mode,
            variance: self.variance,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub seed: u64,
    pub k: usize,
    pub data: DataPaths,
    pub network: NetworkConfig,
    pub dml: DmlSection,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            seed: 0,
            k: prefnet::crossfit::DEFAULT_FOLDS,
            data: DataPaths::default(),
            network: prefnet::simulate::desk_network(),
            dml: DmlSection::default(),
        }
    }
}

impl FitConfig {
    /// Parse a config file; relative data paths are resolved against its directory.
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: FitConfig = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.profiles,
            &mut cfg.data.covariates,
            &mut cfg.data.schema,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.k < 2 {
            return Err(CliError::usage(format!(
                "--k must be at least 2, got {}",
                self.k
            )));
        }
        if !(self.dml.ridge.is_finite() && self.dml.ridge >= 0.0) {
            return Err(CliError::usage("--ridge must be a non-negative number"));
        }
        for (name, p) in [
            ("--data", &self.data.profiles),
            ("--covariates", &self.data.covariates),
            ("--schema", &self.data.schema),
        ] {
            if p.is_none() {
                return Err(CliError::usage(format!(
                    "{name} is required (flag or config file)"
                )));
            }
        }
        self.network
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))
    }
}

/// Parse a comma separated list of layer widths.
pub fn parse_hidden(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad layer width `{w}`"))
        })
        .collect()
}
