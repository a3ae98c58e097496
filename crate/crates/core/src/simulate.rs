//! Synthetic data, benchmark Monte Carlo and factorial design grids.
//!
//! Covariates are standard normal, with the last `⌊p_Z / 4⌋` columns
//! replaced by `±1` coin flips when `p_Z ≥ 4`. Profiles are drawn uniformly
//! over each attribute's levels, and choices follow
//! `y ~ Bernoulli(G(ΔXᵀβ*(Z)))`. Every replication uses the sub-seed
//! `derive_seed(seed, [M, T, p, r])`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baseline;
use crate::crossfit::{self, FoldPlan, PreferenceMatrix};
use crate::dataio::{AttributeSchema, ConjointDataset, Covariates, TaskRecord};
use crate::dml::{self, Correction, DmlOptions};
use crate::exec::Exec;
use crate::link::logistic;
use crate::net::{Network, NetworkConfig, NetworkFile};
use crate::quantities;
use crate::rng::{derive_seed, rng};
use crate::stats;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Pipeline(Box<crate::Error>),
    #[error("cannot access {path}: {message}")]
    Io { path: PathBuf, message: String },
}

type Result<T> = std::result::Result<T, SimError>;

fn pipeline<E: Into<crate::Error>>(e: E) -> SimError {
    SimError::Pipeline(Box::new(e.into()))
}

// ---------------------------------------------------------------------------
// Specification
// ---------------------------------------------------------------------------

/// Mapping from covariates to true preferences `β*(Z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaMap {
    Homogeneous {
        beta: Vec<f64>,
    },
    /// `β = intercept + B Z` with `B` given as `p` rows of length `p_Z`.
    Linear {
        intercept: Vec<f64>,
        slopes: Vec<Vec<f64>>,
    },
    /// `β_A` when `Z_covariate > threshold`, `β_B` otherwise.
    TwoType {
        covariate: usize,
        #[serde(default)]
        threshold: f64,
        beta_a: Vec<f64>,
        beta_b: Vec<f64>,
    },
    /// `β_k = a_k tanh(w_kᵀZ) + c_k`.
    SmoothNonlinear {
        a: Vec<f64>,
        w: Vec<Vec<f64>>,
        c: Vec<f64>,
    },
    FromNetwork {
        path: PathBuf,
    },
}

impl BetaMap {
    /// The default smooth map for `p` columns and `p_Z` covariates.
    /// Each column loads on two neighbouring covariates.
    pub fn standard_smooth(p: usize, p_z: usize) -> BetaMap {
        let c = (0..p)
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                sign * (0.2 + 0.15 * (k % 4) as f64)
            })
            .collect();
        let a = (0..p).map(|k| 0.9 + 0.1 * (k % 3) as f64).collect();
        let w = (0..p)
            .map(|k| {
                let mut row = vec![0.0; p_z];
                if p_z > 0 {
                    row[k % p_z] += 1.2;
                    row[(k + 1) % p_z] += if k % 2 == 0 { 0.6 } else { -0.6 };
                }
                row
            })
            .collect();
        BetaMap::SmoothNonlinear { a, w, c }
    }

    fn width(&self) -> Option<usize> {
        match self {
            BetaMap::Homogeneous { beta } => Some(beta.len()),
            BetaMap::Linear { intercept, .. } => Some(intercept.len()),
            BetaMap::TwoType { beta_a, .. } => Some(beta_a.len()),
            BetaMap::SmoothNonlinear { c, .. } => Some(c.len()),
            BetaMap::FromNetwork { .. } => None,
        }
    }
}

/// Resolved form of [`BetaMap`] that can be evaluated.
enum Truth {
    Map(BetaMap),
    Net(Network),
}

impl Truth {
    fn beta(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Truth::Net(net) => net.forward_beta(z).expect("checked dimensions"),
            Truth::Map(map) => match map {
                BetaMap::Homogeneous { beta } => beta.clone(),
                BetaMap::Linear { intercept, slopes } => intercept
                    .iter()
                    .zip(slopes)
                    .map(|(b0, row)| b0 + row.iter().zip(z).map(|(s, x)| s * x).sum::<f64>())
                    .collect(),
                BetaMap::TwoType {
                    covariate,
                    threshold,
                    beta_a,
                    beta_b,
                } => {
                    if z[*covariate] > *threshold {
                        beta_a.clone()
                    } else {
                        beta_b.clone()
                    }
                }
                BetaMap::SmoothNonlinear { a, w, c } => (0..c.len())
                    .map(|k| {
                        a[k] * w[k].iter().zip(z).map(|(u, x)| u * x).sum::<f64>().tanh() + c[k]
                    })
                    .collect(),
                BetaMap::FromNetwork { .. } => unreachable!("resolved to a network"),
            },
        }
    }
}

/// Per-attribute level counts; level 0 is the reference. Profiles are drawn
/// uniformly and independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub levels: Vec<usize>,
}

impl DesignSpec {
    /// `p` binary attributes.
    pub fn binary(p: usize) -> Self {
        DesignSpec { levels: vec![2; p] }
    }

    pub fn width(&self) -> usize {
        self.levels.iter().map(|l| l - 1).sum()
    }

    pub fn schema(&self) -> AttributeSchema {
        AttributeSchema::with_levels(&self.levels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSpec {
    pub m: usize,
    pub t: usize,
    pub p_z: usize,
    pub design: DesignSpec,
    pub beta_map: BetaMap,
    /// SD of a respondent-level taste shock added to every column of `β*`.
    pub persistence: f64,
    pub replications: usize,
    pub seed: u64,
    pub folds: usize,
    pub network: NetworkConfig,
    pub dml: DmlOptions,
    /// Profile pairs used for the head-to-head probability comparison.
    pub profile_pairs: usize,
}

impl Default for SimSpec {
    fn default() -> Self {
        let p = 5;
        let p_z = 4;
        SimSpec {
            m: 1000,
            t: 5,
            p_z,
            design: DesignSpec::binary(p),
            beta_map: BetaMap::standard_smooth(p, p_z),
            persistence: 0.0,
            replications: 20,
            seed: 2024,
            folds: crossfit::DEFAULT_FOLDS,
            network: desk_network(),
            dml: DmlOptions::default(),
            profile_pairs: 200,
        }
    }
}

/// Network settings used by the desk presets.
pub fn desk_network() -> NetworkConfig {
    NetworkConfig {
        hidden_sizes: vec![32, 32, 16],
        epochs: 150,
        learning_rate: 1e-2,
        l2_penalty: 1e-3,
        ..Default::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "tiny" => Ok(Preset::Tiny),
            other => Err(SimError::Spec(format!(
                "unknown preset `{other}` (expected desk or tiny)"
            ))),
        }
    }
}

impl SimSpec {
    pub fn preset(preset: Preset) -> SimSpec {
        match preset {
            Preset::Desk => SimSpec::default(),
            Preset::Tiny => {
                let p = 3;
                let p_z = 4;
                SimSpec {
                    m: 200,
                    t: 4,
                    p_z,
                    design: DesignSpec::binary(p),
                    beta_map: BetaMap::standard_smooth(p, p_z),
                    replications: 2,
                    folds: 2,
                    network: NetworkConfig {
                        hidden_sizes: vec![8, 8],
                        epochs: 30,
                        learning_rate: 1e-2,
                        ..Default::default()
                    },
                    profile_pairs: 50,
                    ..SimSpec::default()
                }
            }
        }
    }

    pub fn width(&self) -> usize {
        self.design.width()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Spec(m));
        if self.m < 2 || self.t == 0 || self.replications == 0 {
            return bad("M ≥ 2, T ≥ 1 and R ≥ 1 are required".into());
        }
        if self.design.levels.is_empty() || self.design.levels.iter().any(|&l| l < 2) {
            return bad("every attribute needs at least two levels".into());
        }
        if self.folds < 2 || self.folds > self.m {
            return bad(format!("folds must lie in 2..=M, got {}", self.folds));
        }
        if !(self.persistence >= 0.0) {
            return bad("persistence must be non-negative".into());
        }
        let p = self.width();
        if let Some(w) = self.beta_map.width() {
            if w != p {
                return bad(format!("beta map has {w} columns, design has {p}"));
            }
        }
        match &self.beta_map {
            BetaMap::Linear { slopes, .. }
                if slopes.len() != p || slopes.iter().any(|s| s.len() != self.p_z) =>
            {
                bad("linear slopes must be p rows of length p_Z".into())
            }
            BetaMap::TwoType {
                covariate, beta_b, ..
            } if *covariate >= self.p_z || beta_b.len() != p => {
                bad("two-type split needs a valid covariate and equal-length betas".into())
            }
            BetaMap::SmoothNonlinear { a, w, .. }
                if a.len() != p || w.len() != p || w.iter().any(|r| r.len() != self.p_z) =>
            {
                bad("smooth map needs p amplitudes and p weight rows of length p_Z".into())
            }
            _ => Ok(()),
        }
    }

    fn resolve(&self) -> Result<Truth> {
        match &self.beta_map {
            BetaMap::FromNetwork { path } => {
                let net = NetworkFile::load(path)
                    .and_then(|f| f.network())
                    .map_err(pipeline)?;
                if net.input_dim() != self.p_z || net.output_dim() != self.width() {
                    return Err(SimError::Spec(format!(
                        "network maps {}→{}, spec needs {}→{}",
                        net.input_dim(),
                        net.output_dim(),
                        self.p_z,
                        self.width()
                    )));
                }
                Ok(Truth::Net(net))
            }
            other => Ok(Truth::Map(other.clone())),
        }
    }

    /// Number of `±1` columns at the end of `Z`.
    pub fn binary_covariates(&self) -> usize {
        if self.p_z >= 4 {
            self.p_z / 4
        } else {
            0
        }
    }

    fn draw_z<R: Rng>(&self, rng: &mut R, m: usize) -> Array2<f64> {
        let nb = self.binary_covariates();
        Array2::from_shape_fn((m, self.p_z), |(_, j)| {
            if j >= self.p_z - nb {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            } else {
                StandardNormal.sample(rng)
            }
        })
    }

    /// `θ = E[β*(Z)]`: closed form for the parametric maps, 100k-draw Monte
    /// Carlo for network maps.
    pub fn true_theta(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let truth = self.resolve()?;
        Ok(match &self.beta_map {
            BetaMap::Homogeneous { beta } => beta.clone(),
            BetaMap::Linear { intercept, .. } => intercept.clone(),
            BetaMap::SmoothNonlinear { c, .. } => c.clone(),
            BetaMap::TwoType {
                covariate,
                threshold,
                beta_a,
                beta_b,
            } => {
                let binary = *covariate >= self.p_z - self.binary_covariates();
                let share = if binary {
                    if *threshold < -1.0 {
                        1.0
                    } else if *threshold < 1.0 {
                        0.5
                    } else {
                        0.0
                    }
                } else {
                    1.0 - stats::std_normal_cdf(*threshold)
                };
                beta_a
                    .iter()
                    .zip(beta_b)
                    .map(|(a, b)| share * a + (1.0 - share) * b)
                    .collect()
            }
            BetaMap::FromNetwork { .. } => {
                let mut r = rng(derive_seed(self.seed, &[0x0074_6865_7461]));
                let z = self.draw_z(&mut r, 100_000);
                let mut sum = vec![0.0; self.width()];
                for row in z.rows() {
                    for (s, b) in sum.iter_mut().zip(truth.beta(row.as_slice().expect("row"))) {
                        *s += b;
                    }
                }
                sum.iter().map(|s| s / 100_000.0).collect()
            }
        })
    }

    pub fn replication_seed(&self, r: usize) -> u64 {
        derive_seed(
            self.seed,
            &[self.m as u64, self.t as u64, self.width() as u64, r as u64],
        )
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

pub struct Generated {
    pub dataset: ConjointDataset,
    /// `M x p` true preferences, including any persistence shock.
    pub true_beta: Array2<f64>,
    pub true_theta: Vec<f64>,
    /// Raw covariates as drawn.
    pub z: Array2<f64>,
}

pub fn generate(spec: &SimSpec, r: usize) -> Result<Generated> {
    spec.validate()?;
    let truth = spec.resolve()?;
    let true_theta = spec.true_theta()?;
    let mut g = rng(spec.replication_seed(r));
    let (m, t, p) = (spec.m, spec.t, spec.width());
    let z = spec.draw_z(&mut g, m);
    let mut true_beta = Array2::zeros((m, p));
    for i in 0..m {
        let mut b = truth.beta(z.row(i).as_slice().expect("row"));
        if spec.persistence > 0.0 {
            for v in b.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut g);
                *v += spec.persistence * e;
            }
        }
        true_beta.row_mut(i).assign(&Array1::from(b));
    }
    let schema = spec.design.schema();
    let draw_profile = |g: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let sel: Vec<_> = spec
            .design
            .levels
            .iter()
            .map(|&l| crate::dataio::Selection::Level(g.random_range(0..l)))
            .collect();
        schema.encode_profile(&sel).expect("valid levels")
    };
    let mut tasks = Vec::with_capacity(m * t);
    for i in 0..m {
        for task in 0..t {
            let p1 = draw_profile(&mut g);
            let p2 = draw_profile(&mut g);
            let v: f64 = (0..p).map(|k| (p1[k] - p2[k]) * true_beta[[i, k]]).sum();
            let y = if g.random::<f64>() < logistic(v) {
                1.0
            } else {
                0.0
            };
            tasks.push(TaskRecord {
                respondent: i,
                task_id: (task + 1).to_string(),
                profile1: p1,
                profile2: p2,
                y,
            });
        }
    }
    let covariates = Covariates {
        names: (0..spec.p_z).map(|j| format!("z{}", j + 1)).collect(),
        values: z.clone(),
    };
    let ids = (0..m).map(|i| format!("r{i:05}")).collect();
    let dataset = ConjointDataset::from_tasks(schema, ids, covariates, tasks).map_err(pipeline)?;
    Ok(Generated {
        dataset,
        true_beta,
        true_theta,
        z,
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mean over columns of the across-respondent correlation between estimated
/// and true `β`. Columns where either side is constant count as zero.
pub fn individual_correlation(est: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let p = est.ncols();
    let total: f64 = (0..p)
        .map(|k| {
            let a: Vec<f64> = est.column(k).to_vec();
            let b: Vec<f64> = truth.column(k).to_vec();
            stats::correlation(&a, &b)
        })
        .sum();
    total / p as f64
}

pub fn individual_rmse(est: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let n = est.len() as f64;
    (est.iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// Fixed set of contrast vectors `X_A - X_B` drawn from the design.
pub fn profile_contrasts(spec: &SimSpec, count: usize) -> Vec<Vec<f64>> {
    let schema = spec.design.schema();
    let mut g = rng(derive_seed(spec.seed, &[0x7061_6972]));
    (0..count)
        .map(|_| {
            let mut draw = || {
                let sel: Vec<_> = spec
                    .design
                    .levels
                    .iter()
                    .map(|&l| crate::dataio::Selection::Level(g.random_range(0..l)))
                    .collect();
                schema.encode_profile(&sel).expect("valid levels")
            };
            let a = draw();
            let b = draw();
            a.iter().zip(&b).map(|(x, y)| x - y).collect()
        })
        .collect()
}

/// Mean absolute deviation between estimated and true population-average
/// head-to-head probabilities `mean_i G(wᵀβ_i)` over the contrasts.
pub fn profile_probability_mad(
    est: &Array2<f64>,
    truth: &Array2<f64>,
    contrasts: &[Vec<f64>],
) -> f64 {
    let avg = |b: &Array2<f64>, w: &[f64]| -> f64 {
        let m = b.nrows() as f64;
        b.rows()
            .into_iter()
            .map(|row| logistic(row.iter().zip(w).map(|(x, y)| x * y).sum()))
            .sum::<f64>()
            / m
    };
    let total: f64 = contrasts
        .iter()
        .map(|w| (avg(est, w) - avg(truth, w)).abs())
        .sum();
    total / contrasts.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageTimes {
    pub generate: f64,
    pub cross_fit: f64,
    pub dml: f64,
    pub logit: f64,
    pub quantities: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub replication: usize,
    pub seed: u64,
    pub theta_true: Vec<f64>,
    pub theta_dml: Vec<f64>,
    pub se_dml: Vec<f64>,
    pub se_iid: Vec<f64>,
    pub covered_dml: Vec<bool>,
    pub theta_plugin: Vec<f64>,
    pub se_plugin: Vec<f64>,
    pub covered_plugin: Vec<bool>,
    pub theta_logit: Vec<f64>,
    pub se_logit: Vec<f64>,
    pub covered_logit: Vec<bool>,
    pub mean_abs_bias_dml: f64,
    pub mean_abs_bias_plugin: f64,
    pub mean_abs_bias_logit: f64,
    pub indiv_corr_dnn: f64,
    pub indiv_corr_logit: f64,
    pub indiv_rmse_dnn: f64,
    pub indiv_rmse_logit: f64,
    pub profile_mad_dnn: f64,
    pub profile_mad_logit: f64,
    pub polarization_corr: f64,
    pub importance_corr: f64,
    pub se_ratio: Vec<f64>,
    pub times: StageTimes,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimSummary {
    pub completed: usize,
    pub failed: usize,
    pub coverage_dml: Vec<f64>,
    pub coverage_plugin: Vec<f64>,
    pub coverage_logit: Vec<f64>,
    pub mean_abs_bias_dml: f64,
    pub mean_abs_bias_plugin: f64,
    pub mean_abs_bias_logit: f64,
    pub indiv_corr_dnn: f64,
    pub indiv_corr_dnn_sd: f64,
    pub indiv_corr_logit: f64,
    pub indiv_rmse_dnn: f64,
    pub profile_mad_dnn: f64,
    pub profile_mad_logit: f64,
    pub polarization_corr: f64,
    pub importance_corr: f64,
    pub mean_se_ratio: Vec<f64>,
    /// Wall times vary run to run and stay out of serialized reports.
    #[serde(skip)]
    pub mean_times: StageTimes,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimReport {
    pub spec: SimSpec,
    pub columns: Vec<String>,
    pub replications: Vec<ReplicationMetrics>,
    pub failures: Vec<(usize, String)>,
    pub summary: SimSummary,
}

/// Fit everything on one generated replication and score it against truth.
pub fn run_replication(
    spec: &SimSpec,
    r: usize,
    contrasts: &[Vec<f64>],
    exec: Exec,
) -> Result<ReplicationMetrics> {
    let mut times = StageTimes::default();
    let clock = Instant::now();
    let gen = generate(spec, r)?;
    times.generate = clock.elapsed().as_secs_f64();
    let ds = &gen.dataset;
    let seed = spec.replication_seed(r);

    let clock = Instant::now();
    let plan = FoldPlan::new(ds.n_respondents(), spec.folds, seed).map_err(pipeline)?;
    let cfg = NetworkConfig {
        seed,
        ..spec.network.clone()
    };
    let pm = crossfit::cross_fit(ds, &cfg, &plan, exec).map_err(pipeline)?;
    times.cross_fit = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let debiased = dml::run(
        pm.beta.view(),
        ds,
        &DmlOptions {
            correction: Correction::Debiased,
            ..spec.dml
        },
        exec,
    )
    .map_err(pipeline)?;
    // ψ = β̂ has mean θ, so the uncentered cluster sums would measure E[β̂²]
    // rather than dispersion; the plug-in arm uses the centered variance.
    let plug_opts = DmlOptions {
        correction: Correction::PlugIn,
        variance: dml::ClusterVariance::Centered,
        ..spec.dml
    };
    let plug = dml::run(pm.beta.view(), ds, &plug_opts, exec).map_err(pipeline)?;
    times.dml = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let logit = baseline::fit_logit(ds, None).map_err(pipeline)?;
    times.logit = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let theta = &gen.true_theta;
    let p = theta.len();
    let logit_beta = Array2::from_shape_fn((ds.n_respondents(), p), |(_, k)| logit.coef[k]);
    let covered = |lo: &[f64], hi: &[f64]| -> Vec<bool> {
        (0..p)
            .map(|k| lo[k] <= theta[k] && theta[k] <= hi[k])
            .collect()
    };
    let mab =
        |est: &[f64]| -> f64 { (0..p).map(|k| (est[k] - theta[k]).abs()).sum::<f64>() / p as f64 };
    let d = &debiased.estimate;
    let pl = &plug.estimate;
    let logit_lo: Vec<f64> = (0..p)
        .map(|k| logit.coef[k] - dml::Z_95 * logit.se_clustered[k])
        .collect();
    let logit_hi: Vec<f64> = (0..p)
        .map(|k| logit.coef[k] + dml::Z_95 * logit.se_clustered[k])
        .collect();

    let true_pm = PreferenceMatrix::from_beta(gen.true_beta.clone());
    let pol = |m: &PreferenceMatrix| -> Vec<f64> {
        (0..p)
            .map(|k| {
                quantities::polarization(m, k, 0.0)
                    .map(|x| x.frac_positive)
                    .unwrap_or(f64::NAN)
            })
            .collect()
    };
    let polarization_corr = stats::correlation(&pol(&pm), &pol(&true_pm));
    let imp_est = quantities::importance_shares(&pm, ds).map_err(pipeline)?;
    let imp_true = quantities::importance_shares(&true_pm, ds).map_err(pipeline)?;
    let importance_corr = stats::correlation(
        imp_est.shares.as_slice().expect("standard layout"),
        imp_true.shares.as_slice().expect("standard layout"),
    );
    let metrics = ReplicationMetrics {
        replication: r,
        seed,
        theta_true: theta.clone(),
        theta_dml: d.theta.clone(),
        se_dml: d.se_clustered.clone(),
        se_iid: d.se_iid.clone(),
        covered_dml: covered(&d.ci_lower, &d.ci_upper),
        theta_plugin: pl.theta.clone(),
        se_plugin: pl.se_clustered.clone(),
        covered_plugin: covered(&pl.ci_lower, &pl.ci_upper),
        theta_logit: logit.coef.clone(),
        se_logit: logit.se_clustered.clone(),
        covered_logit: covered(&logit_lo, &logit_hi),
        mean_abs_bias_dml: mab(&d.theta),
        mean_abs_bias_plugin: mab(&pl.theta),
        mean_abs_bias_logit: mab(&logit.coef),
        indiv_corr_dnn: individual_correlation(&pm.beta, &gen.true_beta),
        indiv_corr_logit: individual_correlation(&logit_beta, &gen.true_beta),
        indiv_rmse_dnn: individual_rmse(&pm.beta, &gen.true_beta),
        indiv_rmse_logit: individual_rmse(&logit_beta, &gen.true_beta),
        profile_mad_dnn: profile_probability_mad(&pm.beta, &gen.true_beta, contrasts),
        profile_mad_logit: profile_probability_mad(&logit_beta, &gen.true_beta, contrasts),
        polarization_corr,
        importance_corr,
        se_ratio: d.se_ratio.clone(),
        times: StageTimes {
            quantities: clock.elapsed().as_secs_f64(),
            ..times
        },
    };
    Ok(metrics)
}

fn summarize(p: usize, reps: &[ReplicationMetrics], failed: usize) -> SimSummary {
    let n = reps.len();
    let avg = |f: &dyn Fn(&ReplicationMetrics) -> f64| -> f64 {
        stats::mean(&reps.iter().map(f).collect::<Vec<_>>())
    };
    let rate = |f: &dyn Fn(&ReplicationMetrics) -> &Vec<bool>| -> Vec<f64> {
        (0..p)
            .map(|k| reps.iter().filter(|r| f(r)[k]).count() as f64 / n.max(1) as f64)
            .collect()
    };
    let corr: Vec<f64> = reps.iter().map(|r| r.indiv_corr_dnn).collect();
    SimSummary {
        completed: n,
        failed,
        coverage_dml: rate(&|r| &r.covered_dml),
        coverage_plugin: rate(&|r| &r.covered_plugin),
        coverage_logit: rate(&|r| &r.covered_logit),
        mean_abs_bias_dml: avg(&|r| r.mean_abs_bias_dml),
        mean_abs_bias_plugin: avg(&|r| r.mean_abs_bias_plugin),
        mean_abs_bias_logit: avg(&|r| r.mean_abs_bias_logit),
        indiv_corr_dnn: stats::mean(&corr),
        indiv_corr_dnn_sd: stats::sample_variance(&corr).sqrt(),
        indiv_corr_logit: avg(&|r| r.indiv_corr_logit),
        indiv_rmse_dnn: avg(&|r| r.indiv_rmse_dnn),
        profile_mad_dnn: avg(&|r| r.profile_mad_dnn),
        profile_mad_logit: avg(&|r| r.profile_mad_logit),
        polarization_corr: avg(&|r| r.polarization_corr),
        importance_corr: avg(&|r| r.importance_corr),
        mean_se_ratio: (0..p)
            .map(|k| stats::mean(&reps.iter().map(|r| r.se_ratio[k]).collect::<Vec<_>>()))
            .collect(),
        mean_times: StageTimes {
            generate: avg(&|r| r.times.generate),
            cross_fit: avg(&|r| r.times.cross_fit),
            dml: avg(&|r| r.times.dml),
            logit: avg(&|r| r.times.logit),
            quantities: avg(&|r| r.times.quantities),
        },
    }
}

/// Run `spec.replications` independent replications. Replications run in
/// parallel under `Exec::Parallel`; each one is fitted sequentially.
pub fn run_benchmark(spec: &SimSpec, exec: Exec) -> Result<SimReport> {
    spec.validate()?;
    let contrasts = profile_contrasts(spec, spec.profile_pairs);
    let results = exec.map_range(spec.replications, |r| {
        run_replication(spec, r, &contrasts, Exec::Sequential)
    });
    let mut replications = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(m) => replications.push(m),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push((r, e.to_string()));
            }
        }
    }
    let summary = summarize(spec.width(), &replications, failures.len());
    Ok(SimReport {
        spec: spec.clone(),
        columns: spec.design.schema().column_names(),
        replications,
        failures,
        summary,
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SimError {
    SimError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

impl SimReport {
    /// Long format: `replication, metric, attribute, value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record(["replication", "metric", "attribute", "value"])
            .map_err(|e| io_err(path, e))?;
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        for r in &self.replications {
            let rep = r.replication.to_string();
            let mut row = |metric: &str, attr: &str, v: f64| {
                w.write_record([rep.as_str(), metric, attr, &v.to_string()])
            };
            for (k, col) in self.columns.iter().enumerate() {
                row("theta_true", col, r.theta_true[k]).map_err(|e| io_err(path, e))?;
                row("theta_dml", col, r.theta_dml[k]).map_err(|e| io_err(path, e))?;
                row("se_dml", col, r.se_dml[k]).map_err(|e| io_err(path, e))?;
                row("covered_dml", col, flag(r.covered_dml[k])).map_err(|e| io_err(path, e))?;
                row("theta_plugin", col, r.theta_plugin[k]).map_err(|e| io_err(path, e))?;
                row("covered_plugin", col, flag(r.covered_plugin[k]))
                    .map_err(|e| io_err(path, e))?;
                row("theta_logit", col, r.theta_logit[k]).map_err(|e| io_err(path, e))?;
                row("covered_logit", col, flag(r.covered_logit[k])).map_err(|e| io_err(path, e))?;
                row("se_ratio", col, r.se_ratio[k]).map_err(|e| io_err(path, e))?;
            }
            for (metric, v) in [
                ("mean_abs_bias_dml", r.mean_abs_bias_dml),
                ("mean_abs_bias_plugin", r.mean_abs_bias_plugin),
                ("mean_abs_bias_logit", r.mean_abs_bias_logit),
                ("indiv_corr_dnn", r.indiv_corr_dnn),
                ("indiv_corr_logit", r.indiv_corr_logit),
                ("indiv_rmse_dnn", r.indiv_rmse_dnn),
                ("indiv_rmse_logit", r.indiv_rmse_logit),
                ("profile_mad_dnn", r.profile_mad_dnn),
                ("profile_mad_logit", r.profile_mad_logit),
                ("polarization_corr", r.polarization_corr),
                ("importance_corr", r.importance_corr),
            ] {
                row(metric, "", v).map_err(|e| io_err(path, e))?;
            }
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            spec: &'a SimSpec,
            columns: &'a [String],
            failures: &'a [(usize, String)],
            summary: &'a SimSummary,
        }
        write_json(
            path,
            &Out {
                spec: &self.spec,
                columns: &self.columns,
                failures: &self.failures,
                summary: &self.summary,
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Factorial grid
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorialSpec {
    pub ns: Vec<usize>,
    pub ts: Vec<usize>,
    pub ps: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub p_z: usize,
    pub folds: usize,
    pub network: NetworkConfig,
    /// Targets for the minimum-`NT` table.
    pub targets: Vec<f64>,
}

impl Default for FactorialSpec {
    fn default() -> Self {
        FactorialSpec {
            ns: vec![250, 500, 1000, 2000],
            ts: vec![2, 4, 8],
            ps: vec![3, 5],
            replications: 6,
            seed: 2024,
            p_z: 4,
            folds: crossfit::DEFAULT_FOLDS,
            network: desk_network(),
            targets: vec![0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }
}

impl FactorialSpec {
    pub fn preset(preset: Preset) -> FactorialSpec {
        match preset {
            Preset::Desk => FactorialSpec::default(),
            Preset::Tiny => FactorialSpec {
                ns: vec![100, 200],
                ts: vec![2, 4],
                ps: vec![3],
                replications: 3,
                folds: 2,
                network: NetworkConfig {
                    hidden_sizes: vec![8, 8],
                    epochs: 30,
                    learning_rate: 1e-2,
                    ..Default::default()
                },
                ..FactorialSpec::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ts.is_empty() || self.ps.is_empty() {
            return Err(SimError::Spec(
                "factorial grid must be nonempty in N, T and p".into(),
            ));
        }
        if self.replications == 0 {
            return Err(SimError::Spec("R must be at least 1".into()));
        }
        if self.ps.contains(&0) || self.ts.contains(&0) || self.ns.iter().any(|&n| n < self.folds) {
            return Err(SimError::Spec(
                "grid values must be positive and N ≥ folds".into(),
            ));
        }
        Ok(())
    }

    /// Benchmark spec for one cell.
    pub fn cell_spec(&self, n: usize, t: usize, p: usize) -> SimSpec {
        SimSpec {
            m: n,
            t,
            p_z: self.p_z,
            design: DesignSpec::binary(p),
            beta_map: BetaMap::standard_smooth(p, self.p_z),
            persistence: 0.0,
            replications: self.replications,
            seed: self.seed,
            folds: self.folds,
            network: self.network.clone(),
            dml: DmlOptions::default(),
            profile_pairs: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub t: usize,
    pub p: usize,
    pub correlations: Vec<f64>,
    pub abs_biases: Vec<f64>,
    pub mean_correlation: f64,
    pub se_correlation: f64,
    pub mean_abs_bias: f64,
    pub failed: usize,
}

impl Cell {
    pub fn nt(&self) -> usize {
        self.n * self.t
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceShares {
    pub n: f64,
    pub t: f64,
    pub p: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogLinearFit {
    pub p: usize,
    pub intercept: f64,
    pub slope: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompositionTest {
    pub p: usize,
    pub nt: usize,
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub mean_a: f64,
    pub mean_b: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinNtRow {
    pub p: usize,
    pub target: f64,
    /// `None` when the fitted slope is not positive.
    pub min_nt: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorialReport {
    pub spec: FactorialSpec,
    pub cells: Vec<Cell>,
    pub variance_shares: VarianceShares,
    pub loglinear: Vec<LogLinearFit>,
    pub composition: Vec<CompositionTest>,
    pub rank_violations: usize,
    pub adjacent_pairs: usize,
    pub min_nt: Vec<MinNtRow>,
}

impl FactorialReport {
    pub fn violation_rate(&self) -> f64 {
        if self.adjacent_pairs == 0 {
            0.0
        } else {
            self.rank_violations as f64 / self.adjacent_pairs as f64
        }
    }

    pub fn cell(&self, n: usize, t: usize, p: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.n == n && c.t == t && c.p == p)
    }
}

/// Main-effect sums of squares of each factor over the cell means, as shares
/// of the total sum of squares.
pub fn variance_shares(cells: &[Cell]) -> VarianceShares {
    let y: Vec<f64> = cells.iter().map(|c| c.mean_correlation).collect();
    let grand = stats::mean(&y);
    let total: f64 = y.iter().map(|v| (v - grand).powi(2)).sum();
    let factor = |key: &dyn Fn(&Cell) -> usize| -> f64 {
        let mut levels: Vec<usize> = cells.iter().map(key).collect();
        levels.sort_unstable();
        levels.dedup();
        levels
            .iter()
            .map(|&l| {
                let vals: Vec<f64> = cells
                    .iter()
                    .filter(|c| key(c) == l)
                    .map(|c| c.mean_correlation)
                    .collect();
                vals.len() as f64 * (stats::mean(&vals) - grand).powi(2)
            })
            .sum()
    };
    if total <= 0.0 {
        return VarianceShares {
            n: 0.0,
            t: 0.0,
            p: 0.0,
            residual: 0.0,
        };
    }
    let (n, t, p) = (
        factor(&|c| c.n) / total,
        factor(&|c| c.t) / total,
        factor(&|c| c.p) / total,
    );
    VarianceShares {
        n,
        t,
        p,
        residual: (1.0 - n - t - p).max(0.0),
    }
}

/// Adjacent pairs (one grid step in `N` or in `T`, same `p`) and how many of
/// them see the mean correlation fall as `NT` grows.
pub fn rank_violations(cells: &[Cell], spec: &FactorialSpec) -> (usize, usize) {
    let mut ns = spec.ns.clone();
    let mut ts = spec.ts.clone();
    ns.sort_unstable();
    ts.sort_unstable();
    let find =
        |n: usize, t: usize, p: usize| cells.iter().find(|c| c.n == n && c.t == t && c.p == p);
    let (mut violations, mut pairs) = (0, 0);
    for &p in &spec.ps {
        for (a, b) in ns.iter().zip(ns.iter().skip(1)) {
            for &t in &ts {
                if let (Some(x), Some(y)) = (find(*a, t, p), find(*b, t, p)) {
                    pairs += 1;
                    violations += usize::from(y.mean_correlation < x.mean_correlation);
                }
            }
        }
        for (a, b) in ts.iter().zip(ts.iter().skip(1)) {
            for &n in &ns {
                if let (Some(x), Some(y)) = (find(n, *a, p), find(n, *b, p)) {
                    pairs += 1;
                    violations += usize::from(y.mean_correlation < x.mean_correlation);
                }
            }
        }
    }
    (violations, pairs)
}

pub fn run_factorial(spec: &FactorialSpec, exec: Exec) -> Result<FactorialReport> {
    spec.validate()?;
    let mut jobs = Vec::new();
    for &p in &spec.ps {
        for &n in &spec.ns {
            for &t in &spec.ts {
                for r in 0..spec.replications {
                    jobs.push((n, t, p, r));
                }
            }
        }
    }
    let results = exec.map(&jobs, |&(n, t, p, r)| {
        let cell = spec.cell_spec(n, t, p);
        let contrasts = profile_contrasts(&cell, cell.profile_pairs);
        run_replication(&cell, r, &contrasts, Exec::Sequential)
    });
    let mut cells: Vec<Cell> = Vec::new();
    for (&(n, t, p, _), res) in jobs.iter().zip(results) {
        if cells.last().map(|c| (c.n, c.t, c.p)) != Some((n, t, p)) {
            cells.push(Cell {
                n,
                t,
                p,
                correlations: vec![],
                abs_biases: vec![],
                mean_correlation: f64::NAN,
                se_correlation: f64::NAN,
                mean_abs_bias: f64::NAN,
                failed: 0,
            });
        }
        let cell = cells.last_mut().expect("cell");
        match res {
            Ok(m) => {
                cell.correlations.push(m.indiv_corr_dnn);
                cell.abs_biases.push(m.mean_abs_bias_dml);
            }
            Err(e) => {
                log::warn!("cell N={n} T={t} p={p}: {e}");
                cell.failed += 1;
            }
        }
    }
    for c in cells.iter_mut() {
        if c.correlations.is_empty() {
            log::warn!(
                "cell N={} T={} p={} failed in every replication",
                c.n,
                c.t,
                c.p
            );
            continue;
        }
        c.mean_correlation = stats::mean(&c.correlations);
        c.se_correlation =
            (stats::sample_variance(&c.correlations) / c.correlations.len() as f64).sqrt();
        c.mean_abs_bias = stats::mean(&c.abs_biases);
    }
    let ok: Vec<Cell> = cells
        .iter()
        .filter(|c| !c.correlations.is_empty())
        .cloned()
        .collect();

    let mut loglinear = Vec::new();
    let mut min_nt = Vec::new();
    let mut composition = Vec::new();
    for &p in &spec.ps {
        let stratum: Vec<&Cell> = ok.iter().filter(|c| c.p == p).collect();
        let x: Vec<f64> = stratum.iter().map(|c| (c.nt() as f64).ln()).collect();
        let y: Vec<f64> = stratum.iter().map(|c| c.mean_correlation).collect();
        let (slope, intercept) = stats::simple_regression(&x, &y);
        loglinear.push(LogLinearFit {
            p,
            intercept,
            slope,
        });
        for &target in &spec.targets {
            min_nt.push(MinNtRow {
                p,
                target,
                min_nt: (slope > 0.0).then(|| ((target - intercept) / slope).exp()),
            });
        }
        for (i, a) in stratum.iter().enumerate() {
            for b in stratum.iter().skip(i + 1) {
                if a.nt() == b.nt() && a.n != b.n {
                    let (t_stat, p_value) = stats::welch_t_test(&a.correlations, &b.correlations);
                    composition.push(CompositionTest {
                        p,
                        nt: a.nt(),
                        a: (a.n, a.t),
                        b: (b.n, b.t),
                        mean_a: a.mean_correlation,
                        mean_b: b.mean_correlation,
                        t_stat,
                        p_value,
                    });
                }
            }
        }
    }
    let (rank_violations, adjacent_pairs) = rank_violations(&ok, spec);
    Ok(FactorialReport {
        spec: spec.clone(),
        variance_shares: variance_shares(&ok),
        cells,
        loglinear,
        composition,
        rank_violations,
        adjacent_pairs,
        min_nt,
    })
}

impl FactorialReport {
    /// Cell table: `n, t, p, nt, mean_correlation, se_correlation, mean_abs_bias, replications, failed`.
    pub fn write_cells_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record([
            "n",
            "t",
            "p",
            "nt",
            "mean_correlation",
            "se_correlation",
            "mean_abs_bias",
            "replications",
            "failed",
        ])
        .map_err(|e| io_err(path, e))?;
        for c in &self.cells {
            w.write_record([
                c.n.to_string(),
                c.t.to_string(),
                c.p.to_string(),
                c.nt().to_string(),
                c.mean_correlation.to_string(),
                c.se_correlation.to_string(),
                c.mean_abs_bias.to_string(),
                c.correlations.len().to_string(),
                c.failed.to_string(),
            ])
            .map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    /// Minimum `NT` per `(p, target)`, one row per `p` and one column per target.
    pub fn write_min_nt_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        let mut header = vec!["p".to_string()];
        header.extend(self.spec.targets.iter().map(|t| format!("r>={t}")));
        w.write_record(&header).map_err(|e| io_err(path, e))?;
        for &p in &self.spec.ps {
            let mut row = vec![p.to_string()];
            for &target in &self.spec.targets {
                let v = self
                    .min_nt
                    .iter()
                    .find(|r| r.p == p && r.target == target)
                    .and_then(|r| r.min_nt);
                row.push(v.map_or("NA".into(), |v| format!("{:.0}", v)));
            }
            w.write_record(&row).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
