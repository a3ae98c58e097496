//! Homogeneous logit on the differenced design and the subgroup checks that
//! compare it with averages of the preference matrix.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use serde::Serialize;

use crate::crossfit::PreferenceMatrix;
use crate::dataio::ConjointDataset;
use crate::exec::Exec;
use crate::link::logistic;
use crate::quantities::Bins;
use crate::stats;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("no rows selected for the logit fit")]
    Empty,
    #[error(
        "Newton iterations did not converge after {iterations} steps (gradient norm {grad_norm:e})"
    )]
    NoConvergence { iterations: usize, grad_norm: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cannot write {path}: {message}")]
    Write {
        path: std::path::PathBuf,
        message: String,
    },
}

type Result<T> = std::result::Result<T, BaselineError>;

pub const MAX_ITERATIONS: usize = 100;
pub const SEPARATION_BOUND: f64 = 30.0;
pub const MIN_GROUP_ROWS: usize = 200;

#[derive(Clone, Debug, Serialize)]
pub struct LogitFit {
    pub columns: Vec<String>,
    /// Zero for dropped columns.
    pub coef: Vec<f64>,
    pub se_clustered: Vec<f64>,
    pub se_iid: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_lik: f64,
    pub grad_norm: f64,
    pub n_rows: usize,
    pub dropped: Vec<usize>,
    pub warnings: Vec<String>,
}

impl LogitFit {
    pub fn is_estimated(&self, k: usize) -> bool {
        !self.dropped.contains(&k)
    }
}

/// `y v - log(1 + e^v)`, stable in both tails.
fn log_lik_term(v: f64, y: f64) -> f64 {
    let softplus = if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    };
    y * v - softplus
}

/// Greedy column selection: keep a column when its residual sum of squares
/// after projecting on the kept ones is a non-negligible share of its own.
fn independent_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let p = gram.nrows();
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..p {
        let own = gram[(j, j)];
        if !(own > 0.0) {
            continue;
        }
        let resid = if kept.is_empty() {
            own
        } else {
            let a = DMatrix::from_fn(kept.len(), kept.len(), |r, c| gram[(kept[r], kept[c])]);
            let v = DVector::from_fn(kept.len(), |r, _| gram[(kept[r], j)]);
            match a.cholesky() {
                Some(ch) => own - v.dot(&ch.solve(&v)),
                None => 0.0,
            }
        };
        if resid > 1e-9 * own {
            kept.push(j);
        }
    }
    kept
}

/// Newton fit of the no-intercept logit of `y` on the columns of `dx`,
/// over the given rows, with standard errors clustered on `cluster`.
pub fn fit_logit_rows(
    dx: ArrayView2<f64>,
    y: &[f64],
    cluster: &[usize],
    rows: &[usize],
    columns: Vec<String>,
) -> Result<LogitFit> {
    if rows.is_empty() {
        return Err(BaselineError::Empty);
    }
    if y.len() != dx.nrows() || cluster.len() != dx.nrows() || columns.len() != dx.ncols() {
        return Err(BaselineError::Dimension(
            "design, outcome, cluster and names must agree".into(),
        ));
    }
    let p_all = dx.ncols();
    let n = rows.len() as f64;
    let mut warnings = Vec::new();

    let mut gram = DMatrix::zeros(p_all, p_all);
    for &r in rows {
        let x = dx.row(r);
        for a in 0..p_all {
            for b in 0..p_all {
                gram[(a, b)] += x[a] * x[b];
            }
        }
    }
    let kept = independent_columns(&gram);
    let dropped: Vec<usize> = (0..p_all).filter(|k| !kept.contains(k)).collect();
    for &k in &dropped {
        let msg = format!(
            "column `{}` is collinear or constant on the selected rows; dropped",
            columns[k]
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let p = kept.len();
    let xs: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| kept.iter().map(|&k| dx[[r, k]]).collect())
        .collect();
    let ys: Vec<f64> = rows.iter().map(|&r| y[r]).collect();

    let index =
        |b: &DVector<f64>, x: &[f64]| -> f64 { x.iter().zip(b.iter()).map(|(a, c)| a * c).sum() };
    let log_lik = |b: &DVector<f64>| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(x, &yy)| log_lik_term(index(b, x), yy))
            .sum()
    };
    let score_hessian = |b: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        for (x, &yy) in xs.iter().zip(&ys) {
            let pr = logistic(index(b, x));
            let w = pr * (1.0 - pr);
            for a in 0..p {
                g[a] += x[a] * (yy - pr);
                for c in 0..p {
                    h[(a, c)] += w * x[a] * x[c];
                }
            }
        }
        (g, h)
    };

    let mut beta = DVector::zeros(p);
    let mut ll = log_lik(&beta);
    let mut iterations = 0;
    let tol = 1e-8 * n;
    let (mut grad, mut hess) = score_hessian(&beta);
    let mut converged = grad.norm() < tol;
    while !converged {
        if iterations == MAX_ITERATIONS {
            return Err(BaselineError::NoConvergence {
                iterations,
                grad_norm: grad.norm(),
            });
        }
        iterations += 1;
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let scale = hess.diagonal().max().max(1.0);
                let ridged = &hess + DMatrix::identity(p, p) * (1e-8 * scale);
                match ridged.cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => grad.clone(),
                }
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cand_ll = log_lik(&cand);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        (grad, hess) = score_hessian(&beta);
        converged = grad.norm() < tol;
        if !accepted && !converged {
            return Err(BaselineError::NoConvergence {
                iterations,
                grad_norm: grad.norm(),
            });
        }
    }

    if beta.iter().any(|b| b.abs() > SEPARATION_BOUND) {
        let msg = format!("|coef| > {SEPARATION_BOUND}: the outcome may be (quasi-)separated");
        log::warn!("{msg}");
        warnings.push(msg);
    }

    // sandwich H⁻¹ (Σ_m s_m s_mᵀ) H⁻¹ with the M/(M-1) adjustment
    let h_inv = hess
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| hess.clone().try_inverse())
        .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let mut sums: std::collections::BTreeMap<usize, DVector<f64>> = Default::default();
    for ((x, &yy), &r) in xs.iter().zip(&ys).zip(rows) {
        let pr = logistic(index(&beta, x));
        let s = sums.entry(cluster[r]).or_insert_with(|| DVector::zeros(p));
        for a in 0..p {
            s[a] += x[a] * (yy - pr);
        }
    }
    let m = sums.len() as f64;
    let mut meat = DMatrix::zeros(p, p);
    for s in sums.values() {
        meat += s * s.transpose();
    }
    let adj = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    let v_cl = &h_inv * meat * &h_inv * adj;

    let mut coef = vec![0.0; p_all];
    let mut se_clustered = vec![f64::NAN; p_all];
    let mut se_iid = vec![f64::NAN; p_all];
    for (j, &k) in kept.iter().enumerate() {
        coef[k] = beta[j];
        se_clustered[k] = v_cl[(j, j)].sqrt();
        se_iid[k] = h_inv[(j, j)].sqrt();
    }
    Ok(LogitFit {
        columns,
        coef,
        se_clustered,
        se_iid,
        converged,
        iterations,
        log_lik: ll,
        grad_norm: grad.norm(),
        n_rows: rows.len(),
        dropped,
        warnings,
    })
}

/// Pooled logit on all rows, or on the rows where `mask` is true.
pub fn fit_logit(ds: &ConjointDataset, mask: Option<&[bool]>) -> Result<LogitFit> {
    let rows: Vec<usize> = match mask {
        Some(m) => {
            if m.len() != ds.n_rows() {
                return Err(BaselineError::Dimension(format!(
                    "mask has {} entries for {} rows",
                    m.len(),
                    ds.n_rows()
                )));
            }
            (0..ds.n_rows()).filter(|&r| m[r]).collect()
        }
        None => (0..ds.n_rows()).collect(),
    };
    fit_logit_rows(
        ds.delta_x(),
        ds.y(),
        ds.respondent_of(),
        &rows,
        ds.schema().column_names(),
    )
}

// ---------------------------------------------------------------------------
// Validation against preference-matrix averages
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ValidationEntry {
    pub group: String,
    pub level: String,
    pub dnn_mean: f64,
    pub logit_coef: f64,
    pub abs_diff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub n_rows: usize,
    pub correlation: f64,
    pub mad: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SkippedGroup {
    pub group: String,
    pub n_rows: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
    pub correlation: f64,
    pub mad: f64,
    pub groups: Vec<GroupSummary>,
    pub skipped: Vec<SkippedGroup>,
}

fn summarize(entries: &[ValidationEntry]) -> (f64, f64) {
    let a: Vec<f64> = entries.iter().map(|e| e.dnn_mean).collect();
    let b: Vec<f64> = entries.iter().map(|e| e.logit_coef).collect();
    let mad = stats::mean(&entries.iter().map(|e| e.abs_diff).collect::<Vec<_>>());
    (stats::correlation(&a, &b), mad)
}

/// Compare within-group means of `β̂` with group-specific pooled logits.
/// Without `groups` the comparison runs on the full sample as one group.
pub fn validate_averages(
    pm: &PreferenceMatrix,
    ds: &ConjointDataset,
    groups: Option<&Bins>,
    exec: Exec,
) -> Result<ValidationReport> {
    if pm.n_respondents() != ds.n_respondents() || pm.width() != ds.width() {
        return Err(BaselineError::Dimension(
            "preference matrix does not match the dataset".into(),
        ));
    }
    let (names, membership): (Vec<String>, Vec<Option<usize>>) = match groups {
        Some(b) => (b.names.clone(), b.of_respondent.clone()),
        None => (vec!["all".into()], vec![Some(0); ds.n_respondents()]),
    };
    let columns = ds.schema().column_names();
    let fits = exec.map_range(names.len(), |g| {
        let members: Vec<usize> = (0..ds.n_respondents())
            .filter(|&i| membership[i] == Some(g))
            .collect();
        let rows: Vec<usize> = members.iter().flat_map(|&i| ds.rows_of(i)).collect();
        if rows.len() < MIN_GROUP_ROWS {
            return (members, rows.len(), None);
        }
        let fit = fit_logit_rows(
            ds.delta_x(),
            ds.y(),
            ds.respondent_of(),
            &rows,
            columns.clone(),
        );
        (members, rows.len(), Some(fit))
    });

    let mut report = ValidationReport {
        entries: vec![],
        correlation: f64::NAN,
        mad: f64::NAN,
        groups: vec![],
        skipped: vec![],
    };
    for (g, (members, n_rows, fit)) in fits.into_iter().enumerate() {
        let fit = match fit {
            None => {
                log::warn!(
                    "group `{}` has {n_rows} rows (< {MIN_GROUP_ROWS}); skipped",
                    names[g]
                );
                report.skipped.push(SkippedGroup {
                    group: names[g].clone(),
                    n_rows,
                    reason: format!("fewer than {MIN_GROUP_ROWS} rows"),
                });
                continue;
            }
            Some(Err(e)) => {
                log::warn!("group `{}`: {e}; skipped", names[g]);
                report.skipped.push(SkippedGroup {
                    group: names[g].clone(),
                    n_rows,
                    reason: e.to_string(),
                });
                continue;
            }
            Some(Ok(f)) => f,
        };
        let mut group_entries = Vec::new();
        for k in (0..ds.width()).filter(|&k| fit.is_estimated(k)) {
            let col: Vec<f64> = members.iter().map(|&i| pm.beta[[i, k]]).collect();
            let dnn = stats::mean(&col);
            group_entries.push(ValidationEntry {
                group: names[g].clone(),
                level: columns[k].clone(),
                dnn_mean: dnn,
                logit_coef: fit.coef[k],
                abs_diff: (dnn - fit.coef[k]).abs(),
            });
        }
        let (correlation, mad) = summarize(&group_entries);
        report.groups.push(GroupSummary {
            group: names[g].clone(),
            n_rows,
            correlation,
            mad,
        });
        report.entries.extend(group_entries);
    }
    if !report.entries.is_empty() {
        (report.correlation, report.mad) = summarize(&report.entries);
    }
    Ok(report)
}

impl ValidationReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: &dyn std::fmt::Display| BaselineError::Write {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
        w.write_record(["group", "level", "dnn_mean", "logit_coef", "abs_diff"])
            .map_err(|e| err(&e))?;
        for e in &self.entries {
            w.write_record([
                e.group.clone(),
                e.level.clone(),
                e.dnn_mean.to_string(),
                e.logit_coef.to_string(),
                e.abs_diff.to_string(),
            ])
            .map_err(|e| err(&e))?;
        }
        w.flush().map_err(|e| err(&e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            correlation: f64,
            mad: f64,
            groups: &'a [GroupSummary],
            skipped: &'a [SkippedGroup],
        }
        let text = serde_json::to_string_pretty(&Summary {
            correlation: self.correlation,
            mad: self.mad,
            groups: &self.groups,
            skipped: &self.skipped,
        })
        .expect("serializable summary");
        std::fs::write(path, text).map_err(|e| BaselineError::Write {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
