//! Structural quantities computed from a preference matrix.
//!
//! Every function here is a pure map from `β̂` (and, where needed, the
//! design) to a summary. Subgroup summaries use [`Bins`], which partitions
//! respondents by one covariate.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::Serialize;

use crate::crossfit::PreferenceMatrix;
use crate::dataio::{AttributeKind, AttributeSchema, ConjointDataset, DataError, Selection};
use crate::exec::{self, Exec};
use crate::link::logistic;
use crate::stats;

#[derive(Debug, thiserror::Error)]
pub enum QuantityError {
    #[error("column index {index} out of range (p = {width})")]
    LevelOutOfRange { index: usize, width: usize },
    #[error("unknown level `{0}`")]
    UnknownLevel(String),
    #[error("{0} must not be empty")]
    EmptySet(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("marginal effects need single-profile data; the dataset was loaded pre-differenced")]
    NoProfiles,
    #[error(transparent)]
    Schema(#[from] DataError),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("cannot write {path}: {message}")]
    Write {
        path: std::path::PathBuf,
        message: String,
    },
}

type Result<T> = std::result::Result<T, QuantityError>;

fn check_column(pm: &PreferenceMatrix, k: usize) -> Result<()> {
    if k >= pm.width() {
        return Err(QuantityError::LevelOutOfRange {
            index: k,
            width: pm.width(),
        });
    }
    Ok(())
}

/// Resolve a column by its encoded name (`attr:level` or `attr`).
pub fn column(schema: &AttributeSchema, name: &str) -> Result<usize> {
    schema
        .column_index(name)
        .ok_or_else(|| QuantityError::UnknownLevel(name.to_string()))
}

// ---------------------------------------------------------------------------
// Subgroups
// ---------------------------------------------------------------------------

/// A partition of respondents into named groups.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bins {
    pub covariate: String,
    pub names: Vec<String>,
    pub of_respondent: Vec<Option<usize>>,
}

/// Covariates with at most this many distinct values are binned by value.
pub const MAX_CATEGORICAL_VALUES: usize = 10;

fn format_value(v: f64) -> String {
    let r = (v * 1e9).round() / 1e9;
    format!("{r}")
}

impl Bins {
    /// Bin by a covariate: one group per value when it has few distinct
    /// values, terciles otherwise.
    pub fn by_covariate(ds: &ConjointDataset, name: &str) -> Result<Bins> {
        let j = ds
            .covariate_names()
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| QuantityError::UnknownCovariate(name.to_string()))?;
        let values: Vec<f64> = (0..ds.n_respondents())
            .map(|i| ds.raw_covariate(i, j))
            .collect();
        Ok(Self::from_values(name, &values))
    }

    pub fn from_values(name: &str, values: &[f64]) -> Bins {
        let mut distinct: BTreeMap<i64, f64> = BTreeMap::new();
        for &v in values {
            distinct.entry((v * 1e9).round() as i64).or_insert(v);
        }
        if distinct.len() <= MAX_CATEGORICAL_VALUES {
            let keys: Vec<i64> = distinct.keys().copied().collect();
            return Bins {
                covariate: name.to_string(),
                names: distinct
                    .values()
                    .map(|&v| format!("{name}={}", format_value(v)))
                    .collect(),
                of_respondent: values
                    .iter()
                    .map(|v| keys.binary_search(&((v * 1e9).round() as i64)).ok())
                    .collect(),
            };
        }
        let q1 = stats::quantile(values, 1.0 / 3.0);
        let q2 = stats::quantile(values, 2.0 / 3.0);
        Bins {
            covariate: name.to_string(),
            names: vec![
                format!("{name}:T1"),
                format!("{name}:T2"),
                format!("{name}:T3"),
            ],
            of_respondent: values
                .iter()
                .map(|&v| {
                    Some(if v <= q1 {
                        0
                    } else if v <= q2 {
                        1
                    } else {
                        2
                    })
                })
                .collect(),
        }
    }

    pub fn members(&self, g: usize) -> Vec<usize> {
        (0..self.of_respondent.len())
            .filter(|&i| self.of_respondent[i] == Some(g))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupValue {
    pub group: String,
    pub n: usize,
    pub value: f64,
}

/// Mean of a per-respondent value within each bin, ignoring non-finite values.
pub fn group_means(values: &[f64], bins: &Bins) -> Vec<GroupValue> {
    (0..bins.names.len())
        .map(|g| {
            let v: Vec<f64> = bins
                .members(g)
                .into_iter()
                .map(|i| values[i])
                .filter(|x| x.is_finite())
                .collect();
            GroupValue {
                group: bins.names[g].clone(),
                n: v.len(),
                value: stats::mean(&v),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Average marginal effects
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum AmeMethod {
    /// Enumerate when the distinct-profile pair count is at most
    /// [`EXACT_PAIR_LIMIT`], sample otherwise.
    #[default]
    Auto,
    Exact,
    MonteCarlo,
}

pub const EXACT_PAIR_LIMIT: usize = 10_000;
pub const MIN_AME_DRAWS: usize = 1_000;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AmeOptions {
    pub draws: usize,
    pub seed: u64,
    pub method: AmeMethod,
}

impl Default for AmeOptions {
    fn default() -> Self {
        AmeOptions {
            draws: 20_000,
            seed: 0,
            method: AmeMethod::Auto,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Ame {
    pub column: String,
    pub ame: f64,
    /// Zero under exact enumeration.
    pub mc_se: f64,
    pub exact: bool,
}

/// Distinct single profiles with their multiplicities.
fn profile_pool(ds: &ConjointDataset) -> Result<(Array2<f64>, Vec<f64>)> {
    let profiles = ds.profiles().ok_or(QuantityError::NoProfiles)?;
    let p = profiles.ncols();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rows = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for r in profiles.rows() {
        let key: Vec<u64> = r.iter().map(|v| (v + 0.0).to_bits()).collect();
        match index.get(&key) {
            Some(&u) => weights[u] += 1.0,
            None => {
                index.insert(key, weights.len());
                rows.extend(r.iter());
                weights.push(1.0);
            }
        }
    }
    let n = weights.len();
    Ok((Array2::from_shape_vec((n, p), rows).expect("pool"), weights))
}

/// Per-profile utility with the columns of `span` switched off.
fn without_span(
    u: &[f64],
    profiles: ArrayView2<f64>,
    beta: &[f64],
    span: std::ops::Range<usize>,
) -> Vec<f64> {
    profiles
        .rows()
        .into_iter()
        .zip(u)
        .map(|(x, &v)| v - span.clone().map(|c| x[c] * beta[c]).sum::<f64>())
        .collect()
}

/// Columns whose attribute is switched to the reference (categorical) or left
/// alone (continuous) when forming the contrast for column `k`.
fn reset_span(schema: &AttributeSchema, k: usize) -> std::ops::Range<usize> {
    let a = schema.columns()[k].attribute;
    match schema.attributes()[a].kind {
        AttributeKind::Categorical { .. } => schema.span(a),
        AttributeKind::Continuous => k..k,
    }
}

/// Forced-choice marginal effect of every column.
///
/// For column `k` two profiles are drawn from the observed single-profile
/// distribution; profile 1 has `k`'s attribute switched to its reference
/// level and `W` is the encoded difference. The effect averages
/// `G(β_k + Wᵀβ) - G(Wᵀβ)` over respondents and pairs: the change in the
/// probability of choosing profile 1 when it takes level `k`.
pub fn ame_all(
    pm: &PreferenceMatrix,
    ds: &ConjointDataset,
    opts: &AmeOptions,
    exec: Exec,
) -> Result<Vec<Ame>> {
    let cols: Vec<usize> = (0..pm.width()).collect();
    ame_columns(pm, ds, &cols, opts, exec)
}

pub fn ame(
    pm: &PreferenceMatrix,
    ds: &ConjointDataset,
    k: usize,
    opts: &AmeOptions,
    exec: Exec,
) -> Result<Ame> {
    check_column(pm, k)?;
    Ok(ame_columns(pm, ds, &[k], opts, exec)?.remove(0))
}

fn ame_columns(
    pm: &PreferenceMatrix,
    ds: &ConjointDataset,
    cols: &[usize],
    opts: &AmeOptions,
    exec: Exec,
) -> Result<Vec<Ame>> {
    for &k in cols {
        check_column(pm, k)?;
    }
    if pm.width() != ds.width() || pm.n_respondents() != ds.n_respondents() {
        return Err(QuantityError::Invalid(
            "preference matrix does not match the dataset".into(),
        ));
    }
    let (pool, weights) = profile_pool(ds)?;
    let u = pool.nrows();
    let exact = match opts.method {
        AmeMethod::Exact => true,
        AmeMethod::MonteCarlo => false,
        AmeMethod::Auto => u.saturating_mul(u) <= EXACT_PAIR_LIMIT,
    };
    if !exact && opts.draws < MIN_AME_DRAWS {
        return Err(QuantityError::Invalid(format!(
            "at least {MIN_AME_DRAWS} draws are required, got {}",
            opts.draws
        )));
    }
    let schema = ds.schema();
    let names = schema.column_names();
    let m = pm.n_respondents();

    if exact {
        let total_w: f64 = weights.iter().sum();
        // per respondent, per column: Σ_{s,t} w_s w_t [G(β_k + u0_s - u_t) - G(u0_s - u_t)]
        let per = exec.map_range(m, |i| {
            let beta = pm.beta.row(i).to_vec();
            let util: Vec<f64> = pool
                .rows()
                .into_iter()
                .map(|x| x.iter().zip(&beta).map(|(a, b)| a * b).sum())
                .collect();
            cols.iter()
                .map(|&k| {
                    let u0 = without_span(&util, pool.view(), &beta, reset_span(schema, k));
                    let mut acc = 0.0;
                    for (s, &ws) in weights.iter().enumerate() {
                        let mut inner = 0.0;
                        for (t, &wt) in weights.iter().enumerate() {
                            let v = u0[s] - util[t];
                            inner += wt * (logistic(beta[k] + v) - logistic(v));
                        }
                        acc += ws * inner;
                    }
                    acc / (total_w * total_w)
                })
                .collect::<Vec<f64>>()
        });
        return Ok(cols
            .iter()
            .enumerate()
            .map(|(c, &k)| Ame {
                column: names[k].clone(),
                ame: per.iter().map(|v| v[c]).sum::<f64>() / m as f64,
                mc_se: 0.0,
                exact: true,
            })
            .collect());
    }

    let profiles = ds.profiles().ok_or(QuantityError::NoProfiles)?;
    let n_prof = profiles.nrows();
    let chunks = exec::chunks(opts.draws, 1024);
    let parts = exec.map(&chunks, |range| {
        let mut rng = crate::rng::rng(crate::rng::derive_seed(
            opts.seed,
            &[0x414d45, range.start as u64],
        ));
        let mut sums = vec![(0.0, 0.0); cols.len()];
        for _ in range.clone() {
            let i = rng.random_range(0..m);
            let s = rng.random_range(0..n_prof);
            let t = rng.random_range(0..n_prof);
            let beta = pm.beta.row(i);
            let x1 = profiles.row(s);
            let x2 = profiles.row(t);
            let base: f64 = (0..beta.len()).map(|c| (x1[c] - x2[c]) * beta[c]).sum();
            for (c, &k) in cols.iter().enumerate() {
                let v = base - reset_span(schema, k).map(|j| x1[j] * beta[j]).sum::<f64>();
                let d = logistic(beta[k] + v) - logistic(v);
                sums[c].0 += d;
                sums[c].1 += d * d;
            }
        }
        sums
    });
    let n = opts.draws as f64;
    Ok(cols
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let (s, ss) = parts
                .iter()
                .fold((0.0, 0.0), |acc, p| (acc.0 + p[c].0, acc.1 + p[c].1));
            let mean = s / n;
            let var = ((ss - n * mean * mean) / (n - 1.0)).max(0.0);
            Ame {
                column: names[k].clone(),
                ame: mean,
                mc_se: (var / n).sqrt(),
                exact: false,
            }
        })
        .collect())
}

/// Linear-probability AMCE: OLS of `y - 1/2` on `ΔX` without intercept.
pub fn lpm_amce(ds: &ConjointDataset) -> Result<Vec<f64>> {
    let p = ds.width();
    let dx = ds.delta_x();
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut xty = nalgebra::DVector::<f64>::zeros(p);
    for (r, x) in dx.rows().into_iter().enumerate() {
        let yc = ds.y()[r] - 0.5;
        for a in 0..p {
            xty[a] += x[a] * yc;
            for b in 0..p {
                xtx[(a, b)] += x[a] * x[b];
            }
        }
    }
    let sol = xtx
        .cholesky()
        .ok_or_else(|| QuantityError::Invalid("design is rank deficient".into()))?
        .solve(&xty);
    Ok(sol.iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Distributional summaries
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Polarization {
    pub frac_positive: f64,
    pub frac_negative: f64,
    pub frac_zero: f64,
}

pub fn polarization(pm: &PreferenceMatrix, k: usize, tol: f64) -> Result<Polarization> {
    check_column(pm, k)?;
    if !(tol >= 0.0) {
        return Err(QuantityError::Invalid(format!(
            "tolerance must be non-negative, got {tol}"
        )));
    }
    let col = pm.beta.column(k);
    let m = col.len() as f64;
    let (mut pos, mut neg) = (0usize, 0usize);
    for &b in col.iter() {
        if b.abs() <= tol {
            continue;
        }
        if b > 0.0 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    let zero = col.len() - pos - neg;
    Ok(Polarization {
        frac_positive: pos as f64 / m,
        frac_negative: neg as f64 / m,
        frac_zero: zero as f64 / m,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ImportanceShares {
    pub attributes: Vec<String>,
    /// `M x A`, rows sum to one.
    pub shares: Array2<f64>,
    /// Respondents with an all-zero weighted row, given uniform shares.
    pub degenerate: Vec<usize>,
}

impl ImportanceShares {
    pub fn mean_shares(&self) -> Vec<f64> {
        self.shares
            .columns()
            .into_iter()
            .map(|c| c.mean().unwrap_or(f64::NAN))
            .collect()
    }
}

/// Per-respondent share of utility variance `Σ_{k∈g} β̂_k² Var(X_k)` by attribute.
pub fn importance_shares(pm: &PreferenceMatrix, ds: &ConjointDataset) -> Result<ImportanceShares> {
    let schema = ds.schema();
    if pm.width() != schema.width() {
        return Err(QuantityError::Invalid(
            "preference matrix does not match the schema".into(),
        ));
    }
    let var = ds.design_var();
    let groups = schema.column_groups();
    let a = schema.attributes().len();
    let m = pm.n_respondents();
    let mut shares = Array2::zeros((m, a));
    let mut degenerate = Vec::new();
    for i in 0..m {
        let mut row = vec![0.0; a];
        for k in 0..pm.width() {
            row[groups[k]] += pm.beta[[i, k]].powi(2) * var[k];
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for g in 0..a {
                shares[[i, g]] = row[g] / total;
            }
        } else {
            degenerate.push(i);
            shares.row_mut(i).fill(1.0 / a as f64);
        }
    }
    Ok(ImportanceShares {
        attributes: schema
            .attributes()
            .iter()
            .map(|at| at.name.clone())
            .collect(),
        shares,
        degenerate,
    })
}

pub const MRS_DENOMINATOR_EPS: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct Mrs {
    /// `None` where `|β̂_k| < eps`.
    pub ratios: Vec<Option<f64>>,
    pub undefined: usize,
    pub mean_ratio: f64,
    pub median_ratio: f64,
    /// `mean(β̂_j) / mean(β̂_k)` over all respondents.
    pub ratio_of_means: f64,
}

impl Mrs {
    pub fn values(&self) -> Vec<f64> {
        self.ratios.iter().map(|r| r.unwrap_or(f64::NAN)).collect()
    }
}

/// `β̂_j / β̂_k` per respondent.
pub fn mrs(pm: &PreferenceMatrix, j: usize, k: usize, eps: f64) -> Result<Mrs> {
    check_column(pm, j)?;
    check_column(pm, k)?;
    let ratios: Vec<Option<f64>> = pm
        .beta
        .rows()
        .into_iter()
        .map(|b| (b[k].abs() >= eps).then(|| b[j] / b[k]))
        .collect();
    let defined: Vec<f64> = ratios.iter().flatten().copied().collect();
    let undefined = ratios.len() - defined.len();
    let means = pm.column_means();
    Ok(Mrs {
        undefined,
        mean_ratio: stats::mean(&defined),
        median_ratio: stats::quantile(&defined, 0.5),
        ratio_of_means: means[j] / means[k],
        ratios,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Benefit {
    /// No compensation: `β̂_j ≥ 0`.
    None,
    Level(usize),
    /// `Σ w · β̂_k`, or `Σ w · |β̂_k|` when the flag is set.
    Weighted(Vec<(usize, f64, bool)>),
    /// The respondent's most valued level in the set.
    MaxOf(Vec<usize>),
}

impl Benefit {
    fn columns(&self) -> Vec<usize> {
        match self {
            Benefit::None => vec![],
            Benefit::Level(k) => vec![*k],
            Benefit::Weighted(w) => w.iter().map(|t| t.0).collect(),
            Benefit::MaxOf(s) => s.clone(),
        }
    }

    pub fn value(&self, beta: &[f64]) -> f64 {
        match self {
            Benefit::None => 0.0,
            Benefit::Level(k) => beta[*k],
            Benefit::Weighted(w) => w
                .iter()
                .map(|&(k, wt, abs)| wt * if abs { beta[k].abs() } else { beta[k] })
                .sum(),
            Benefit::MaxOf(s) => s.iter().map(|&k| beta[k]).fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Compensation {
    pub fraction: f64,
    pub holds: Vec<bool>,
    pub by_group: Vec<GroupValue>,
}

/// Share of respondents with `β̂_j + benefit ≥ 0`.
pub fn compensating_differential(
    pm: &PreferenceMatrix,
    penalty: usize,
    benefit: &Benefit,
    bins: Option<&Bins>,
) -> Result<Compensation> {
    check_column(pm, penalty)?;
    if matches!(benefit, Benefit::Weighted(w) if w.is_empty())
        || matches!(benefit, Benefit::MaxOf(s) if s.is_empty())
    {
        return Err(QuantityError::EmptySet("benefit set"));
    }
    for k in benefit.columns() {
        check_column(pm, k)?;
    }
    let holds: Vec<bool> = pm
        .beta
        .rows()
        .into_iter()
        .map(|b| {
            let b = b.to_vec();
            b[penalty] + benefit.value(&b) >= 0.0
        })
        .collect();
    let ind: Vec<f64> = holds.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
    Ok(Compensation {
        fraction: stats::mean(&ind),
        by_group: bins.map(|b| group_means(&ind, b)).unwrap_or_default(),
        holds,
    })
}

// ---------------------------------------------------------------------------
// Counterfactual profiles
// ---------------------------------------------------------------------------

fn contrast(schema: &AttributeSchema, a: &[Selection], b: &[Selection]) -> Result<Vec<f64>> {
    let xa = schema.encode_profile(a)?;
    let xb = schema.encode_profile(b)?;
    Ok(xa.iter().zip(&xb).map(|(u, v)| u - v).collect())
}

fn indices(pm: &PreferenceMatrix, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != pm.width() {
        return Err(QuantityError::Invalid(
            "profile width does not match the preference matrix".into(),
        ));
    }
    Ok(pm
        .beta
        .rows()
        .into_iter()
        .map(|b| w.iter().zip(b.iter()).map(|(x, c)| x * c).sum())
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct ChoiceProbabilities {
    pub probabilities: Vec<f64>,
    pub mean: f64,
    pub share_above_half: f64,
    pub by_group: Vec<GroupValue>,
}

/// `G((X_A - X_B)ᵀ β̂_i)` per respondent.
pub fn choice_probability(
    pm: &PreferenceMatrix,
    schema: &AttributeSchema,
    a: &[Selection],
    b: &[Selection],
    bins: Option<&Bins>,
) -> Result<ChoiceProbabilities> {
    let w = contrast(schema, a, b)?;
    let probabilities: Vec<f64> = indices(pm, &w)?.into_iter().map(logistic).collect();
    let above: Vec<f64> = probabilities
        .iter()
        .map(|&p| if p > 0.5 { 1.0 } else { 0.0 })
        .collect();
    Ok(ChoiceProbabilities {
        mean: stats::mean(&probabilities),
        share_above_half: stats::mean(&above),
        by_group: bins
            .map(|bn| group_means(&probabilities, bn))
            .unwrap_or_default(),
        probabilities,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Majority {
    pub frac_positive: f64,
    pub frac_negative: f64,
    pub frac_ties: f64,
}

/// Share of respondents whose deterministic index favours `A`.
pub fn majority_preference(
    pm: &PreferenceMatrix,
    schema: &AttributeSchema,
    a: &[Selection],
    b: &[Selection],
) -> Result<Majority> {
    let w = contrast(schema, a, b)?;
    let idx = indices(pm, &w)?;
    let m = idx.len() as f64;
    let pos = idx.iter().filter(|&&v| v > 0.0).count() as f64;
    let neg = idx.iter().filter(|&&v| v < 0.0).count() as f64;
    Ok(Majority {
        frac_positive: pos / m,
        frac_negative: neg / m,
        frac_ties: (m - pos - neg) / m,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Progressivity {
    pub slopes: Vec<f64>,
    pub mean_slope: f64,
    pub frac_positive: f64,
    pub frac_top_above_bottom: f64,
}

/// Within-respondent OLS slope of bracket coefficients on log midpoints.
/// `None` stands for the reference level, whose coefficient is zero.
pub fn progressivity_slope(
    pm: &PreferenceMatrix,
    brackets: &[Option<usize>],
    midpoints: &[f64],
) -> Result<Progressivity> {
    if brackets.len() < 2 {
        return Err(QuantityError::Invalid(
            "at least two brackets are required".into(),
        ));
    }
    if midpoints.len() != brackets.len() || midpoints.iter().any(|&m| !(m > 0.0)) {
        return Err(QuantityError::Invalid(
            "one positive midpoint per bracket is required".into(),
        ));
    }
    for k in brackets.iter().flatten() {
        check_column(pm, *k)?;
    }
    let x: Vec<f64> = midpoints.iter().map(|m| m.ln()).collect();
    let coef = |b: &[f64], k: Option<usize>| k.map_or(0.0, |k| b[k]);
    let mut slopes = Vec::with_capacity(pm.n_respondents());
    let mut top = 0usize;
    for row in pm.beta.rows() {
        let b = row.to_vec();
        let ys: Vec<f64> = brackets.iter().map(|&k| coef(&b, k)).collect();
        slopes.push(stats::simple_regression(&x, &ys).0);
        if ys[ys.len() - 1] > ys[0] {
            top += 1;
        }
    }
    let m = slopes.len() as f64;
    Ok(Progressivity {
        mean_slope: stats::mean(&slopes),
        frac_positive: slopes.iter().filter(|&&s| s > 0.0).count() as f64 / m,
        frac_top_above_bottom: top as f64 / m,
        slopes,
    })
}

/// `(1/|S|) Σ_{k∈S} |β̂_k|` per respondent.
pub fn sensitivity_index(pm: &PreferenceMatrix, set: &[usize]) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(QuantityError::EmptySet("level set"));
    }
    for &k in set {
        check_column(pm, k)?;
    }
    let n = set.len() as f64;
    Ok(pm
        .beta
        .rows()
        .into_iter()
        .map(|b| set.iter().map(|&k| b[k].abs()).sum::<f64>() / n)
        .collect())
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

/// Write a header and string rows as CSV.
pub fn write_table(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| QuantityError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    w.write_record(header).map_err(|e| err(&e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

/// `respondent_id, <name>` for a per-respondent vector.
pub fn write_per_respondent(
    path: &Path,
    ds: &ConjointDataset,
    name: &str,
    values: &[f64],
) -> Result<()> {
    write_table(
        path,
        &["respondent_id", name],
        ds.respondent_ids()
            .iter()
            .zip(values)
            .map(|(id, v)| vec![id.clone(), v.to_string()]),
    )
}

pub fn write_groups(path: &Path, values: &[GroupValue]) -> Result<()> {
    write_table(
        path,
        &["group", "n", "value"],
        values
            .iter()
            .map(|g| vec![g.group.clone(), g.n.to_string(), g.value.to_string()]),
    )
}
