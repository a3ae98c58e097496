//! Respondent-level K-fold cross-fitting.
//!
//! Every respondent's `β̂(Z_i)` comes from a network that never saw any of
//! that respondent's tasks.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::ConjointDataset;
use crate::exec::Exec;
use crate::net::{self, NetError, Network, NetworkConfig};

#[derive(Debug, thiserror::Error)]
pub enum CrossFitError {
    #[error("invalid fold plan: {0}")]
    Plan(String),
    #[error("training fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: NetError,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad preference matrix file: {0}")]
    Format(String),
}

type Result<T> = std::result::Result<T, CrossFitError>;

pub const DEFAULT_FOLDS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold id of each respondent.
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Uniform random partition of `m` respondents into `k` folds whose sizes
    /// differ by at most one.
    pub fn new(m: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(CrossFitError::Plan(format!(
                "need at least 2 folds, got {k}"
            )));
        }
        if k > m {
            return Err(CrossFitError::Plan(format!(
                "{k} folds for only {m} respondents"
            )));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut crate::rng::rng(seed));
        let mut assignment = vec![0; m];
        for (pos, &i) in order.iter().enumerate() {
            assignment[i] = pos % k;
        }
        Ok(FoldPlan {
            k,
            assignment,
            seed,
        })
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Out-of-fold preference estimates `β̂(Z_i)`, one row per respondent.
#[derive(Clone, Debug)]
pub struct PreferenceMatrix {
    pub beta: Array2<f64>,
    pub fold_of: Vec<usize>,
    pub nets: Vec<Network>,
    pub loss_histories: Vec<Vec<f64>>,
}

impl PreferenceMatrix {
    /// Wrap an externally supplied `M x p` matrix (single pseudo-fold, no nets).
    pub fn from_beta(beta: Array2<f64>) -> Self {
        let m = beta.nrows();
        PreferenceMatrix {
            beta,
            fold_of: vec![0; m],
            nets: vec![],
            loss_histories: vec![],
        }
    }

    pub fn n_respondents(&self) -> usize {
        self.beta.nrows()
    }

    pub fn width(&self) -> usize {
        self.beta.ncols()
    }

    /// Column means of `β̂` (the plug-in average).
    pub fn column_means(&self) -> Vec<f64> {
        self.beta
            .mean_axis(Axis(0))
            .map(|m| m.to_vec())
            .unwrap_or_else(|| vec![f64::NAN; self.width()])
    }

    /// CSV with `respondent_id, fold` and one column per design column.
    pub fn write_csv(&self, path: &Path, ds: &ConjointDataset) -> Result<()> {
        let io = |source| CrossFitError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w =
            csv::Writer::from_path(path).map_err(|e| CrossFitError::Format(e.to_string()))?;
        let mut header = vec!["respondent_id".to_string(), "fold".to_string()];
        header.extend(ds.schema().column_names());
        w.write_record(&header)
            .map_err(|e| CrossFitError::Format(e.to_string()))?;
        for (i, id) in ds.respondent_ids().iter().enumerate() {
            let mut rec = vec![id.clone(), self.fold_of[i].to_string()];
            rec.extend(self.beta.row(i).iter().map(|v| format!("{v}")));
            w.write_record(&rec)
                .map_err(|e| CrossFitError::Format(e.to_string()))?;
        }
        w.flush().map_err(io)
    }

    /// Read a matrix written by [`write_csv`](Self::write_csv), reordering
    /// rows to match `ds`.
    pub fn read_csv(path: &Path, ds: &ConjointDataset) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| CrossFitError::Format(format!("{}: {e}", path.display())))?;
        let headers = rdr
            .headers()
            .map_err(|e| CrossFitError::Format(e.to_string()))?
            .clone();
        let names = ds.schema().column_names();
        if headers.len() != names.len() + 2
            || headers.iter().skip(2).ne(names.iter().map(String::as_str))
        {
            return Err(CrossFitError::Format(
                "preference columns do not match the schema".into(),
            ));
        }
        let index: std::collections::HashMap<&str, usize> = ds
            .respondent_ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut beta = Array2::from_elem((ds.n_respondents(), names.len()), f64::NAN);
        let mut fold_of = vec![0; ds.n_respondents()];
        let mut seen = vec![false; ds.n_respondents()];
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CrossFitError::Format(e.to_string()))?;
            let id = rec.get(0).unwrap_or("");
            let &i = index
                .get(id)
                .ok_or_else(|| CrossFitError::Format(format!("unknown respondent `{id}`")))?;
            seen[i] = true;
            fold_of[i] = rec[1]
                .parse()
                .map_err(|_| CrossFitError::Format("bad fold id".into()))?;
            for k in 0..names.len() {
                beta[[i, k]] = rec[k + 2]
                    .parse()
                    .map_err(|_| CrossFitError::Format(format!("bad value `{}`", &rec[k + 2])))?;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(CrossFitError::Format(format!(
                "respondent `{}` missing from preference file",
                ds.respondent_ids()[i]
            )));
        }
        Ok(PreferenceMatrix {
            beta,
            fold_of,
            nets: vec![],
            loss_histories: vec![],
        })
    }

    pub fn write_nets(
        &self,
        dir: &Path,
        ds: &ConjointDataset,
        cfg: &NetworkConfig,
    ) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|source| CrossFitError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut paths = Vec::new();
        for (f, net) in self.nets.iter().enumerate() {
            let path = dir.join(format!("fold_{f:02}.json"));
            let fold_cfg = NetworkConfig {
                seed: cfg.seed.wrapping_add(f as u64),
                ..cfg.clone()
            };
            net::NetworkFile::new(net, Some(&fold_cfg))
                .with_dataset(ds)
                .save(&path)
                .map_err(|source| CrossFitError::Fold { fold: f, source })?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Train one network per fold on the other `K - 1` folds and predict the
/// held-out respondents. Fold `f` uses seed `cfg.seed + f`; folds may train
/// in parallel and are assembled in fold order.
pub fn cross_fit(
    ds: &ConjointDataset,
    cfg: &NetworkConfig,
    plan: &FoldPlan,
    exec: Exec,
) -> Result<PreferenceMatrix> {
    if plan.assignment.len() != ds.n_respondents() {
        return Err(CrossFitError::Plan(format!(
            "plan covers {} respondents, dataset has {}",
            plan.assignment.len(),
            ds.n_respondents()
        )));
    }
    if let Some(&f) = plan.assignment.iter().find(|&&f| f >= plan.k) {
        return Err(CrossFitError::Plan(format!("fold id {f} >= K={}", plan.k)));
    }
    cfg.validate()
        .map_err(|source| CrossFitError::Fold { fold: 0, source })?;
    // Parallelism lives at the fold level; each fold trains sequentially.
    let inner = if exec.is_parallel() {
        Exec::Sequential
    } else {
        exec
    };
    let fits = exec.map_range(plan.k, |f| {
        let fold_cfg = NetworkConfig {
            seed: cfg.seed.wrapping_add(f as u64),
            ..cfg.clone()
        };
        net::train_on(ds, &plan.complement(f), &fold_cfg, inner)
            .map_err(|source| CrossFitError::Fold { fold: f, source })
    });
    let mut beta = Array2::zeros((ds.n_respondents(), ds.width()));
    let mut nets = Vec::with_capacity(plan.k);
    let mut histories = Vec::with_capacity(plan.k);
    for (f, fit) in fits.into_iter().enumerate() {
        let fit = fit?;
        let held_out = plan.members(f);
        let z = ds.z().select(Axis(0), &held_out);
        let pred = fit
            .network
            .forward_batch(z.view())
            .map_err(|source| CrossFitError::Fold { fold: f, source })?;
        for (row, &i) in held_out.iter().enumerate() {
            beta.row_mut(i).assign(&pred.row(row));
        }
        nets.push(fit.network);
        histories.push(fit.loss_history);
    }
    Ok(PreferenceMatrix {
        beta,
        fold_of: plan.assignment.clone(),
        nets,
        loss_histories: histories,
    })
}

/// Single network trained on all respondents, evaluated in-sample.
pub fn fit_full(ds: &ConjointDataset, cfg: &NetworkConfig, exec: Exec) -> Result<PreferenceMatrix> {
    let fit =
        net::train(ds, cfg, exec).map_err(|source| CrossFitError::Fold { fold: 0, source })?;
    let beta = fit
        .network
        .forward_batch(ds.z())
        .map_err(|source| CrossFitError::Fold { fold: 0, source })?;
    Ok(PreferenceMatrix {
        beta,
        fold_of: vec![0; ds.n_respondents()],
        nets: vec![fit.network],
        loss_histories: vec![fit.loss_history],
    })
}
