//! Debiased inference on `θ_k = E[β_k(Z)]`.
//!
//! For every row `(i, t)` the influence value is
//!
//! ```text
//! ψ_it = β̂(Z_i) + Λ̂(Z_i)⁻¹ ΔX_it (y_it - G(ΔX_itᵀ β̂(Z_i)))
//! ```
//!
//! where `Λ̂(Z_i)` is the local information matrix
//! `E[G'(ΔXᵀβ(Z)) ΔX ΔXᵀ | Z]` at respondent `i`'s preference vector.
//! `θ̂` is the column mean of `ψ` and its variance is clustered by
//! respondent.
//!
//! Since contrasts are randomized independently of `Z`, the conditional
//! expectation in `Λ̂(Z_i)` is taken over all observed contrasts
//! ([`LambdaMode::Pooled`]); [`LambdaMode::OwnRows`] restricts it to the
//! respondent's own tasks for sensitivity checks.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::ConjointDataset;
use crate::exec::Exec;
use crate::link::{logistic, logistic_density};
use crate::stats;

#[derive(Debug, thiserror::Error)]
pub enum DmlError {
    #[error(
        "local information matrix of respondent {respondent} is not positive definite \
         (ridge {ridge:e}); increase the ridge"
    )]
    NotPositiveDefinite { respondent: usize, ridge: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid option: {0}")]
    Invalid(String),
    #[error("cannot write {path}: {message}")]
    Write {
        path: std::path::PathBuf,
        message: String,
    },
}

type Result<T> = std::result::Result<T, DmlError>;

/// Diagonal regularization added to each `Λ̂(Z_i)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Ridge {
    /// `c · trace(Λ̂) / p`.
    Relative(f64),
    Absolute(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-6)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    #[default]
    Pooled,
    OwnRows,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    #[default]
    Debiased,
    /// `ψ = β̂`: the uncorrected plug-in average.
    PlugIn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterVariance {
    /// `M/(M-1) · N⁻² · Σ_m (Σ_t ψ_mt)²`.
    #[default]
    Uncentered,
    /// Same with cluster sums centered at `T_m θ̂`.
    Centered,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DmlOptions {
    pub ridge: Ridge,
    pub lambda_mode: LambdaMode,
    pub correction: Correction,
    pub variance: ClusterVariance,
}

pub const Z_95: f64 = 1.96;

// ---------------------------------------------------------------------------
// Local information
// ---------------------------------------------------------------------------

/// Distinct contrast rows with multiplicities.
struct Contrasts {
    p: usize,
    rows: Vec<f64>,
    weights: Vec<f64>,
}

impl Contrasts {
    fn from_rows(dx: ArrayView2<f64>, rows: std::ops::Range<usize>) -> Self {
        let p = dx.ncols();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut out = Contrasts {
            p,
            rows: Vec::new(),
            weights: Vec::new(),
        };
        for r in rows {
            let row = dx.row(r);
            // -0.0 and 0.0 must collapse together
            let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            match index.get(&key) {
                Some(&u) => out.weights[u] += 1.0,
                None => {
                    index.insert(key, out.weights.len());
                    out.rows.extend(row.iter());
                    out.weights.push(1.0);
                }
            }
        }
        out
    }

    fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `Σ_u w_u G'(x_uᵀβ) x_u x_uᵀ / Σ w`, upper triangle then mirrored.
    fn information(&self, beta: &[f64]) -> DMatrix<f64> {
        let p = self.p;
        let mut acc = vec![0.0; p * p];
        for (x, &w) in self.rows.chunks_exact(p).zip(&self.weights) {
            let v: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
            let s = w * logistic_density(v);
            if s == 0.0 {
                continue;
            }
            for a in 0..p {
                let sa = s * x[a];
                if sa == 0.0 {
                    continue;
                }
                for b in a..p {
                    acc[a * p + b] += sa * x[b];
                }
            }
        }
        let n = self.total().max(1.0);
        DMatrix::from_fn(p, p, |a, b| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            acc[lo * p + hi] / n
        })
    }
}

/// Per-respondent `Λ̂(Z_i)` (ridge included) and its inverse.
#[derive(Clone, Debug)]
pub struct LocalInformation {
    pub matrices: Vec<DMatrix<f64>>,
    pub inverses: Vec<DMatrix<f64>>,
    pub ridges: Vec<f64>,
}

fn check_beta(beta: ArrayView2<f64>, ds: &ConjointDataset) -> Result<()> {
    if beta.nrows() != ds.n_respondents() || beta.ncols() != ds.width() {
        return Err(DmlError::Dimension(format!(
            "β̂ is {}x{}, dataset needs {}x{}",
            beta.nrows(),
            beta.ncols(),
            ds.n_respondents(),
            ds.width()
        )));
    }
    Ok(())
}

/// Build and factorize `Λ̂(Z_i)` for every respondent.
pub fn estimate_lambda(
    beta: ArrayView2<f64>,
    ds: &ConjointDataset,
    ridge: Ridge,
    mode: LambdaMode,
    exec: Exec,
) -> Result<LocalInformation> {
    check_beta(beta, ds)?;
    match ridge {
        Ridge::Relative(c) | Ridge::Absolute(c) if !(c.is_finite() && c >= 0.0) => {
            return Err(DmlError::Invalid(format!(
                "ridge must be non-negative, got {c}"
            )))
        }
        _ => {}
    }
    let pooled =
        (mode == LambdaMode::Pooled).then(|| Contrasts::from_rows(ds.delta_x(), 0..ds.n_rows()));
    let p = ds.width();
    let results = exec.map_range(ds.n_respondents(), |i| {
        let b = beta.row(i).to_vec();
        let mut lambda = match &pooled {
            Some(c) => c.information(&b),
            None => Contrasts::from_rows(ds.delta_x(), ds.rows_of(i)).information(&b),
        };
        let r = match ridge {
            Ridge::Absolute(c) => c,
            Ridge::Relative(c) => c * lambda.trace() / p as f64,
        };
        for k in 0..p {
            lambda[(k, k)] += r;
        }
        let inverse = lambda.clone().cholesky().map(|ch| ch.inverse()).ok_or(
            DmlError::NotPositiveDefinite {
                respondent: i,
                ridge: r,
            },
        )?;
        Ok((lambda, inverse, r))
    });
    let mut info = LocalInformation {
        matrices: Vec::with_capacity(results.len()),
        inverses: Vec::with_capacity(results.len()),
        ridges: Vec::with_capacity(results.len()),
    };
    for res in results {
        let (l, inv, r) = res?;
        info.matrices.push(l);
        info.inverses.push(inv);
        info.ridges.push(r);
    }
    Ok(info)
}

// ---------------------------------------------------------------------------
// Influence values and the estimate
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct InfluenceTable {
    /// `N x p`.
    pub psi: Array2<f64>,
    /// `Ĝ_it` per row.
    pub ghat: Vec<f64>,
    pub correction: Correction,
}

impl InfluenceTable {
    /// Column means of `ψ`, summed in row order.
    pub fn column_means(&self) -> Vec<f64> {
        let n = self.psi.nrows() as f64;
        (0..self.psi.ncols())
            .map(|k| self.psi.column(k).iter().sum::<f64>() / n)
            .collect()
    }
}

pub fn influence(
    beta: ArrayView2<f64>,
    ds: &ConjointDataset,
    info: &LocalInformation,
    correction: Correction,
    exec: Exec,
) -> Result<InfluenceTable> {
    check_beta(beta, ds)?;
    if correction == Correction::Debiased && info.inverses.len() != ds.n_respondents() {
        return Err(DmlError::Dimension("one Λ̂ per respondent required".into()));
    }
    let p = ds.width();
    let dx = ds.delta_x();
    let y = ds.y();
    let blocks = exec.map_range(ds.n_respondents(), |i| {
        let b = beta.row(i);
        let rows = ds.rows_of(i);
        let mut psi = Vec::with_capacity(rows.len() * p);
        let mut ghat = Vec::with_capacity(rows.len());
        for r in rows {
            let x = dx.row(r);
            let v: f64 = x.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
            let g = logistic(v);
            ghat.push(g);
            match correction {
                Correction::PlugIn => psi.extend(b.iter()),
                Correction::Debiased => {
                    let inv = &info.inverses[i];
                    let resid = y[r] - g;
                    for k in 0..p {
                        let mut c = 0.0;
                        for j in 0..p {
                            c += inv[(k, j)] * x[j];
                        }
                        psi.push(b[k] + c * resid);
                    }
                }
            }
        }
        (psi, ghat)
    });
    let mut flat = Vec::with_capacity(ds.n_rows() * p);
    let mut ghat = Vec::with_capacity(ds.n_rows());
    for (psi, g) in blocks {
        flat.extend(psi);
        ghat.extend(g);
    }
    let psi = Array2::from_shape_vec((ds.n_rows(), p), flat).expect("N x p influence values");
    Ok(InfluenceTable {
        psi,
        ghat,
        correction,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DmlEstimate {
    pub columns: Vec<String>,
    pub theta: Vec<f64>,
    pub se_clustered: Vec<f64>,
    pub se_iid: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub p_values: Vec<f64>,
    pub se_ratio: Vec<f64>,
    pub n_rows: usize,
    pub n_clusters: usize,
    pub correction: Correction,
    pub variance: ClusterVariance,
}

impl DmlEstimate {
    pub fn covers(&self, k: usize, truth: f64) -> bool {
        self.ci_lower[k] <= truth && truth <= self.ci_upper[k]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: &dyn std::fmt::Display| DmlError::Write {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
        w.write_record([
            "level",
            "theta",
            "se_clustered",
            "se_iid",
            "ci_lo",
            "ci_hi",
            "p_value",
            "se_ratio",
        ])
        .map_err(|e| err(&e))?;
        for k in 0..self.theta.len() {
            w.write_record([
                self.columns[k].clone(),
                self.theta[k].to_string(),
                self.se_clustered[k].to_string(),
                self.se_iid[k].to_string(),
                self.ci_lower[k].to_string(),
                self.ci_upper[k].to_string(),
                self.p_values[k].to_string(),
                self.se_ratio[k].to_string(),
            ])
            .map_err(|e| err(&e))?;
        }
        w.flush().map_err(|e| err(&e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DmlError::Write {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| DmlError::Write {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// `θ̂`, clustered and iid standard errors, 95% intervals and normal p-values.
pub fn estimate(
    it: &InfluenceTable,
    ds: &ConjointDataset,
    variance: ClusterVariance,
) -> DmlEstimate {
    let n = it.psi.nrows();
    let p = it.psi.ncols();
    let theta = it.column_means();
    let clusters: Vec<std::ops::Range<usize>> = (0..ds.n_respondents())
        .map(|i| ds.rows_of(i))
        .filter(|r| !r.is_empty())
        .collect();
    let m = clusters.len() as f64;
    let nf = n as f64;
    let mut est = DmlEstimate {
        columns: ds.schema().column_names(),
        theta: theta.clone(),
        se_clustered: vec![0.0; p],
        se_iid: vec![0.0; p],
        ci_lower: vec![0.0; p],
        ci_upper: vec![0.0; p],
        p_values: vec![0.0; p],
        se_ratio: vec![0.0; p],
        n_rows: n,
        n_clusters: clusters.len(),
        correction: it.correction,
        variance,
    };
    for k in 0..p {
        let col = it.psi.column(k);
        let mut ss = 0.0;
        for rows in &clusters {
            let mut s: f64 = rows.clone().map(|r| col[r]).sum();
            if variance == ClusterVariance::Centered {
                s -= rows.len() as f64 * theta[k];
            }
            ss += s * s;
        }
        let var_cl = if m > 1.0 {
            m / (m - 1.0) * ss / (nf * nf)
        } else {
            f64::NAN
        };
        let var_iid = stats::sample_variance(col.as_slice().unwrap_or(&col.to_vec())) / nf;
        let se = var_cl.sqrt();
        est.se_clustered[k] = se;
        est.se_iid[k] = var_iid.sqrt();
        est.ci_lower[k] = theta[k] - Z_95 * se;
        est.ci_upper[k] = theta[k] + Z_95 * se;
        est.p_values[k] = stats::normal_two_sided_p(theta[k] / se);
        est.se_ratio[k] = se / var_iid.sqrt();
    }
    est
}

/// Everything produced by one pass of the debiasing pipeline.
#[derive(Clone, Debug)]
pub struct DmlFit {
    pub lambda: Option<LocalInformation>,
    pub influence: InfluenceTable,
    pub estimate: DmlEstimate,
}

/// Λ̂ → ψ → θ̂ with the given options.
pub fn run(
    beta: ArrayView2<f64>,
    ds: &ConjointDataset,
    opts: &DmlOptions,
    exec: Exec,
) -> Result<DmlFit> {
    let lambda = match opts.correction {
        Correction::Debiased => Some(estimate_lambda(
            beta,
            ds,
            opts.ridge,
            opts.lambda_mode,
            exec,
        )?),
        Correction::PlugIn => None,
    };
    let empty = LocalInformation {
        matrices: vec![],
        inverses: vec![],
        ridges: vec![],
    };
    let it = influence(
        beta,
        ds,
        lambda.as_ref().unwrap_or(&empty),
        opts.correction,
        exec,
    )?;
    let est = estimate(&it, ds, opts.variance);
    Ok(DmlFit {
        lambda,
        influence: it,
        estimate: est,
    })
}

// ---------------------------------------------------------------------------
// Orthogonality probe
// ---------------------------------------------------------------------------

pub const DEFAULT_PROBE_GRID: [f64; 7] = [-0.05, -0.02, -0.01, 0.0, 0.01, 0.02, 0.05];

#[derive(Clone, Debug, Serialize)]
pub struct OrthogonalityProbe {
    pub grid: Vec<f64>,
    /// `θ̂(r)` per grid point (rows) and attribute (columns).
    pub theta: Vec<Vec<f64>>,
    pub plug_in: Vec<Vec<f64>>,
    /// Per attribute: coefficients of `θ̂(r) ≈ a + b r + c r²`.
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
    pub plug_in_linear: Vec<f64>,
}

/// Least-squares `(a, b, c)` of `y ≈ a + b r + c r²`.
fn quadratic_fit(r: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let x = DMatrix::from_fn(r.len(), 3, |i, j| r[i].powi(j as i32));
    let yv = nalgebra::DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * yv;
    let sol = xtx
        .lu()
        .solve(&xty)
        .unwrap_or_else(|| nalgebra::DVector::from_element(3, f64::NAN));
    (sol[0], sol[1], sol[2])
}

/// Recompute the full pipeline at `β̂ + r·h` for each `r` in `grid` and fit a
/// quadratic in `r`. A vanishing linear coefficient is the finite-sample face
/// of Neyman orthogonality; the plug-in average drifts with slope `mean(h)`.
pub fn orthogonality_probe(
    beta: ArrayView2<f64>,
    ds: &ConjointDataset,
    direction: ArrayView2<f64>,
    grid: &[f64],
    opts: &DmlOptions,
    exec: Exec,
) -> Result<OrthogonalityProbe> {
    check_beta(direction, ds)?;
    if grid.len() < 3 {
        return Err(DmlError::Invalid(
            "probe grid needs at least three points".into(),
        ));
    }
    let p = ds.width();
    let mut theta = Vec::with_capacity(grid.len());
    let mut plug = Vec::with_capacity(grid.len());
    for &r in grid {
        let shifted = &beta + &(&direction * r);
        let debiased = DmlOptions {
            correction: Correction::Debiased,
            ..*opts
        };
        theta.push(run(shifted.view(), ds, &debiased, exec)?.estimate.theta);
        let plug_opts = DmlOptions {
            correction: Correction::PlugIn,
            ..*opts
        };
        plug.push(run(shifted.view(), ds, &plug_opts, exec)?.estimate.theta);
    }
    let mut linear = Vec::with_capacity(p);
    let mut quadratic = Vec::with_capacity(p);
    let mut plug_in_linear = Vec::with_capacity(p);
    for k in 0..p {
        let col: Vec<f64> = theta.iter().map(|t| t[k]).collect();
        let (_, b, c) = quadratic_fit(grid, &col);
        linear.push(b);
        quadratic.push(c);
        let pcol: Vec<f64> = plug.iter().map(|t| t[k]).collect();
        plug_in_linear.push(quadratic_fit(grid, &pcol).1);
    }
    Ok(OrthogonalityProbe {
        grid: grid.to_vec(),
        theta,
        plug_in: plug,
        linear,
        quadratic,
        plug_in_linear,
    })
}
