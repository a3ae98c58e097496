//! Feature network `Z ↦ β(Z)` with a structural logit head.
//!
//! Hidden layers are dense + ReLU; the output layer is linear and produces the
//! `p` marginal utilities. The model layer turns `β(Z)` into the logit index
//! `ΔXᵀβ(Z)`, and training minimizes the mean binary cross-entropy of the
//! observed choices, i.e. the negative log-likelihood of the heterogeneous
//! logit.
//!
//! Because `β` depends only on the respondent, the forward and backward passes
//! run once per respondent; the per-row work is a dot product and the
//! residual `(G(v) - y)·ΔX` accumulated into `∂L/∂β_i`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ConjointDataset;
use crate::exec::{self, Exec};
use crate::link::{cross_entropy, logistic};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite ({loss}) at epoch {epoch}; try a lower learning rate")]
    NonFinite { epoch: usize, loss: f64 },
    #[error("cannot access {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad network file: {0}")]
    Format(String),
}

type Result<T> = std::result::Result<T, NetError>;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

/// Respondent-level batching. Mini-batches hold whole respondents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSize {
    Respondents(usize),
    #[serde(with = "full_literal")]
    Full,
}

mod full_literal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("full")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "full" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!(
                "expected \"full\" or a count, got `{s}`"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub l2_penalty: f64,
    pub seed: u64,
    pub batch_size: BatchSize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_sizes: vec![32, 32, 16],
            epochs: 2000,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            l2_penalty: 0.0,
            seed: 0,
            batch_size: BatchSize::Full,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(NetError::InvalidConfig(
                "hidden sizes must be a non-empty list of positive widths".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(NetError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NetError::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if !(self.l2_penalty.is_finite() && self.l2_penalty >= 0.0) {
            return Err(NetError::InvalidConfig(
                "l2 penalty must be non-negative".into(),
            ));
        }
        if self.batch_size == BatchSize::Respondents(0) {
            return Err(NetError::InvalidConfig(
                "batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Dense layer; `weights` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Dense>,
}

/// Gradient of the objective, laid out like [`Network::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }
}

impl Network {
    /// He-uniform hidden layers, zero biases, and an all-zero output layer,
    /// so a fresh network predicts `β ≡ 0` (loss `ln 2`).
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Self {
        let mut rng = crate::rng::rng(seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &width in hidden {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let weights =
                Array2::from_shape_fn((width, fan_in), |_| rng.random_range(-bound..bound));
            layers.push(Dense {
                weights,
                bias: Array1::zeros(width),
            });
            fan_in = width;
        }
        layers.push(Dense::zeros(fan_in, output_dim));
        Network { layers }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        Network {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetError::Dimension(
                "a network needs at least one layer".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(NetError::Dimension(format!(
                    "layer {i}: bias length != rows"
                )));
            }
            if i > 0 && l.weights.ncols() != layers[i - 1].weights.nrows() {
                return Err(NetError::Dimension(format!(
                    "layer {i}: input width mismatch"
                )));
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weights.nrows()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weights.nrows())
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// `β(z)` for one covariate vector.
    pub fn forward_beta(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(NetError::Dimension(format!(
                "covariate vector has length {}, network expects {}",
                z.len(),
                self.input_dim()
            )));
        }
        let zz = ArrayView2::from_shape((1, z.len()), z).expect("contiguous row");
        Ok(self.forward_batch(zz)?.row(0).to_vec())
    }

    /// `β(Z)` for every row of `z` (`n x p_Z` → `n x p`).
    pub fn forward_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.input_dim() {
            return Err(NetError::Dimension(format!(
                "covariate matrix has {} columns, network expects {}",
                z.ncols(),
                self.input_dim()
            )));
        }
        Ok(self.forward_cached(z).pop().expect("output layer"))
    }

    /// Logit index `dxᵀβ(z)`.
    pub fn logit_index(&self, z: &[f64], dx: &[f64]) -> Result<f64> {
        if dx.len() != self.output_dim() {
            return Err(NetError::Dimension(format!(
                "contrast has length {}, network outputs {}",
                dx.len(),
                self.output_dim()
            )));
        }
        let beta = self.forward_beta(z)?;
        Ok(beta.iter().zip(dx).map(|(b, x)| b * x).sum())
    }

    /// Activations of every layer: `[h_1, ..., h_L, β]` (inputs excluded).
    fn forward_cached(&self, z: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { z } else { acts[i - 1].view() };
            let mut a = input.dot(&layer.weights.t());
            a += &layer.bias;
            if i < last {
                a.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(a);
        }
        acts
    }

    /// Back-propagate `∂L/∂β` (`n x p`) through the layers.
    fn backward(&self, z: ArrayView2<f64>, acts: &[Array2<f64>], d_beta: Array2<f64>) -> Gradients {
        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        let mut delta = d_beta;
        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 { z } else { acts[i - 1].view() };
            grads[i].weights = delta.t().dot(&input);
            grads[i].bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut d_prev = delta.dot(&self.layers[i].weights);
                ndarray::Zip::from(&mut d_prev)
                    .and(&acts[i - 1])
                    .for_each(|d, &h| {
                        if h <= 0.0 {
                            *d = 0.0
                        }
                    });
                delta = d_prev;
            }
        }
        Gradients { layers: grads }
    }

    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|w| w.is_finite()))
    }

    fn l2_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

fn check_dims(net: &Network, ds: &ConjointDataset) -> Result<()> {
    if net.input_dim() != ds.n_covariates() || net.output_dim() != ds.width() {
        return Err(NetError::Dimension(format!(
            "network is {}→{}, dataset has p_Z={} and p={}",
            net.input_dim(),
            net.output_dim(),
            ds.n_covariates(),
            ds.width()
        )));
    }
    Ok(())
}

/// Cross-entropy sum and (optionally) gradient sum over one chunk of
/// respondents, each row's contribution divided by `norm`.
fn chunk_objective(
    net: &Network,
    ds: &ConjointDataset,
    respondents: &[usize],
    norm: f64,
    want_grad: bool,
) -> (f64, Option<Gradients>) {
    let z = ds.z().select(Axis(0), respondents);
    let acts = net.forward_cached(z.view());
    let beta = acts.last().expect("output");
    let p = ds.width();
    let dx = ds.delta_x();
    let dx = dx.as_slice().expect("standard layout");
    let y = ds.y();
    let mut loss = 0.0;
    let mut d_beta = Array2::zeros((respondents.len(), p));
    for (c, &i) in respondents.iter().enumerate() {
        let b = beta.row(c);
        let mut db = d_beta.row_mut(c);
        for r in ds.rows_of(i) {
            let x = &dx[r * p..(r + 1) * p];
            let v: f64 = x.iter().zip(b.iter()).map(|(a, b)| a * b).sum();
            loss += cross_entropy(v, y[r]);
            if want_grad {
                let resid = (logistic(v) - y[r]) / norm;
                for (d, xk) in db.iter_mut().zip(x) {
                    *d += resid * xk;
                }
            }
        }
    }
    let grads = want_grad.then(|| net.backward(z.view(), &acts, d_beta));
    (loss / norm, grads)
}

/// Mean cross-entropy (plus `l2 · Σ‖W‖²`) over the rows of `respondents`,
/// and its gradient. Chunks are reduced in a fixed order.
fn objective(
    net: &Network,
    ds: &ConjointDataset,
    respondents: &[usize],
    l2: f64,
    want_grad: bool,
    exec: Exec,
) -> (f64, Option<Gradients>) {
    let n_rows: usize = respondents.iter().map(|&i| ds.rows_of(i).len()).sum();
    let norm = n_rows.max(1) as f64;
    let chunks = exec::chunks(respondents.len(), exec::CHUNK);
    let parts = exec.map(&chunks, |range| {
        chunk_objective(net, ds, &respondents[range.clone()], norm, want_grad)
    });
    let mut loss = 0.0;
    let mut grads = want_grad.then(|| net.zero_gradients());
    for (l, g) in parts {
        loss += l;
        if let (Some(total), Some(g)) = (grads.as_mut(), g) {
            total.add_assign(&g);
        }
    }
    if l2 > 0.0 {
        loss += l2 * net.l2_norm_sq();
        if let Some(total) = grads.as_mut() {
            for (g, layer) in total.layers.iter_mut().zip(&net.layers) {
                g.weights.scaled_add(2.0 * l2, &layer.weights);
            }
        }
    }
    (loss, grads)
}

/// Mean binary cross-entropy over all rows, probabilities clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn loss(net: &Network, ds: &ConjointDataset) -> Result<f64> {
    check_dims(net, ds)?;
    let all: Vec<usize> = (0..ds.n_respondents()).collect();
    Ok(objective(net, ds, &all, 0.0, false, Exec::Sequential).0)
}

/// Exact gradient of [`loss`] with respect to every weight and bias.
pub fn gradients(net: &Network, ds: &ConjointDataset) -> Result<Gradients> {
    check_dims(net, ds)?;
    let all: Vec<usize> = (0..ds.n_respondents()).collect();
    Ok(objective(net, ds, &all, 0.0, true, Exec::Sequential)
        .1
        .expect("gradient requested"))
}

/// Loss and gradient restricted to the rows of `respondents`, including the
/// L2 penalty.
pub fn objective_on(
    net: &Network,
    ds: &ConjointDataset,
    respondents: &[usize],
    l2: f64,
    exec: Exec,
) -> Result<(f64, Gradients)> {
    check_dims(net, ds)?;
    let (l, g) = objective(net, ds, respondents, l2, true, exec);
    Ok((l, g.expect("gradient requested")))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainedNetwork {
    pub network: Network,
    /// Objective before each optimizer epoch, followed by the final value.
    pub loss_history: Vec<f64>,
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    t: i32,
}

fn apply_step(net: &mut Network, g: &Gradients, cfg: &NetworkConfig, adam: &mut AdamState) {
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (layer, gl) in net.layers.iter_mut().zip(&g.layers) {
                layer.weights.scaled_add(-lr, &gl.weights);
                layer.bias.scaled_add(-lr, &gl.bias);
            }
        }
        Optimizer::Adam => {
            adam.t += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(adam.t);
            let c2 = 1.0 - ADAM_BETA2.powi(adam.t);
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            };
            for (((layer, gl), ml), vl) in net
                .layers
                .iter_mut()
                .zip(&g.layers)
                .zip(adam.m.layers.iter_mut())
                .zip(adam.v.layers.iter_mut())
            {
                ndarray::Zip::from(&mut layer.weights)
                    .and(&gl.weights)
                    .and(&mut ml.weights)
                    .and(&mut vl.weights)
                    .for_each(|p, &g, m, v| update(p, g, m, v));
                ndarray::Zip::from(&mut layer.bias)
                    .and(&gl.bias)
                    .and(&mut ml.bias)
                    .and(&mut vl.bias)
                    .for_each(|p, &g, m, v| update(p, g, m, v));
            }
        }
    }
}

/// Train on every respondent of `ds`.
pub fn train(ds: &ConjointDataset, cfg: &NetworkConfig, exec: Exec) -> Result<TrainedNetwork> {
    let all: Vec<usize> = (0..ds.n_respondents()).collect();
    train_on(ds, &all, cfg, exec)
}

/// Train on the rows of the given respondents only.
pub fn train_on(
    ds: &ConjointDataset,
    respondents: &[usize],
    cfg: &NetworkConfig,
    exec: Exec,
) -> Result<TrainedNetwork> {
    cfg.validate()?;
    let mut net = Network::new(ds.n_covariates(), &cfg.hidden_sizes, ds.width(), cfg.seed);
    let mut adam = AdamState {
        m: net.zero_gradients(),
        v: net.zero_gradients(),
        t: 0,
    };
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut shuffle_rng = crate::rng::rng(crate::rng::derive_seed(cfg.seed, &[0x5348_5546]));
    let mut order = respondents.to_vec();
    for epoch in 0..cfg.epochs {
        let epoch_loss = match cfg.batch_size {
            BatchSize::Full => {
                let (l, g) = objective(&net, ds, respondents, cfg.l2_penalty, true, exec);
                if !l.is_finite() {
                    return Err(NetError::NonFinite { epoch, loss: l });
                }
                apply_step(&mut net, &g.expect("gradient"), cfg, &mut adam);
                if !net.is_finite() {
                    return Err(NetError::NonFinite {
                        epoch,
                        loss: f64::INFINITY,
                    });
                }
                l
            }
            BatchSize::Respondents(size) => {
                order.shuffle(&mut shuffle_rng);
                let mut weighted = 0.0;
                let mut rows = 0usize;
                for batch in order.chunks(size) {
                    let (l, g) = objective(&net, ds, batch, cfg.l2_penalty, true, exec);
                    if !l.is_finite() {
                        return Err(NetError::NonFinite { epoch, loss: l });
                    }
                    let n: usize = batch.iter().map(|&i| ds.rows_of(i).len()).sum();
                    weighted += l * n as f64;
                    rows += n;
                    apply_step(&mut net, &g.expect("gradient"), cfg, &mut adam);
                    if !net.is_finite() {
                        return Err(NetError::NonFinite {
                            epoch,
                            loss: f64::INFINITY,
                        });
                    }
                }
                weighted / rows.max(1) as f64
            }
        };
        history.push(epoch_loss);
    }
    let (final_loss, _) = objective(&net, ds, respondents, cfg.l2_penalty, false, exec);
    if !final_loss.is_finite() {
        return Err(NetError::NonFinite {
            epoch: cfg.epochs,
            loss: final_loss,
        });
    }
    history.push(final_loss);
    Ok(TrainedNetwork {
        network: net,
        loss_history: history,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

pub const NETWORK_FORMAT: &str = "prefnet-network";
pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    /// Row-major `rows x cols`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// On-disk network: dimensions, row-major weights and optional metadata
/// needed to evaluate raw-scale covariates.
#[derive(Serialize, Deserialize)]
pub struct NetworkFile {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_sizes: Vec<usize>,
    layers: Vec<LayerFile>,
    #[serde(default)]
    pub config: Option<NetworkConfig>,
    #[serde(default)]
    pub covariate_names: Vec<String>,
    #[serde(default)]
    pub covariate_means: Vec<f64>,
    #[serde(default)]
    pub covariate_sds: Vec<f64>,
    #[serde(default)]
    pub column_names: Vec<String>,
}

impl NetworkFile {
    pub fn new(net: &Network, config: Option<&NetworkConfig>) -> Self {
        NetworkFile {
            format: NETWORK_FORMAT.into(),
            version: NETWORK_FORMAT_VERSION,
            input_dim: net.input_dim(),
            output_dim: net.output_dim(),
            hidden_sizes: net.hidden_sizes(),
            layers: net
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            config: config.cloned(),
            covariate_names: vec![],
            covariate_means: vec![],
            covariate_sds: vec![],
            column_names: vec![],
        }
    }

    /// Attach the dataset's covariate scaling and column names.
    pub fn with_dataset(mut self, ds: &ConjointDataset) -> Self {
        self.covariate_names = ds.covariate_names().to_vec();
        self.covariate_means = ds.covariate_means().to_vec();
        self.covariate_sds = ds.covariate_sds().to_vec();
        self.column_names = ds.schema().column_names();
        self
    }

    pub fn network(&self) -> Result<Network> {
        if self.format != NETWORK_FORMAT {
            return Err(NetError::Format(format!(
                "unexpected format tag `{}`",
                self.format
            )));
        }
        if self.version != NETWORK_FORMAT_VERSION {
            return Err(NetError::Format(format!(
                "unsupported version {}",
                self.version
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let weights = Array2::from_shape_vec((l.rows, l.cols), l.weights.clone())
                    .map_err(|e| NetError::Format(e.to_string()))?;
                Ok(Dense {
                    weights,
                    bias: Array1::from(l.bias.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Network::from_layers(layers)?;
        if net.input_dim() != self.input_dim || net.output_dim() != self.output_dim {
            return Err(NetError::Format(
                "declared dimensions disagree with layers".into(),
            ));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| NetError::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| NetError::Format(e.to_string()))
    }
}
