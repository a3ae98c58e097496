#![allow(dead_code)]

use ndarray::Array2;
use prefnet::dataio::{AttributeSchema, ConjointDataset, Covariates, Selection, TaskRecord};
use prefnet::link::logistic;
use prefnet::net::{self, Network, NetworkConfig};
use prefnet::{crossfit, Exec, FoldPlan, PreferenceMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_z(rng: &mut ChaCha8Rng, m: usize, p_z: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, p_z), |_| StandardNormal.sample(rng))
}

/// Uniform random profiles, `t` tasks per respondent, choices drawn from the
/// logit with `β_i = beta(z_i)`.
pub fn simulate(
    schema: &AttributeSchema,
    z: &Array2<f64>,
    t: usize,
    seed: u64,
    beta: impl Fn(&[f64]) -> Vec<f64>,
) -> (ConjointDataset, Array2<f64>) {
    let mut g = rng(seed);
    let m = z.nrows();
    let p = schema.width();
    let counts: Vec<usize> = schema
        .attributes()
        .iter()
        .map(|a| match &a.kind {
            prefnet::dataio::AttributeKind::Categorical { levels, .. } => levels.len(),
            prefnet::dataio::AttributeKind::Continuous => panic!("categorical only"),
        })
        .collect();
    let mut truth = Array2::zeros((m, p));
    let mut tasks = Vec::with_capacity(m * t);
    for i in 0..m {
        let b = beta(z.row(i).as_slice().unwrap());
        assert_eq!(b.len(), p);
        for (k, v) in b.iter().enumerate() {
            truth[[i, k]] = *v;
        }
        for task in 0..t {
            let mut draw = || {
                let sel: Vec<Selection> = counts
                    .iter()
                    .map(|&l| Selection::Level(g.random_range(0..l)))
                    .collect();
                schema.encode_profile(&sel).unwrap()
            };
            let p1 = draw();
            let p2 = draw();
            let v: f64 = (0..p).map(|k| (p1[k] - p2[k]) * b[k]).sum();
            let y = if g.random::<f64>() < logistic(v) {
                1.0
            } else {
                0.0
            };
            tasks.push(TaskRecord {
                respondent: i,
                task_id: task.to_string(),
                profile1: p1,
                profile2: p2,
                y,
            });
        }
    }
    let covariates = Covariates {
        names: (0..z.ncols()).map(|j| format!("z{}", j + 1)).collect(),
        values: z.clone(),
    };
    let ids = (0..m).map(|i| format!("r{i:05}")).collect();
    (
        ConjointDataset::from_tasks(schema.clone(), ids, covariates, tasks).unwrap(),
        truth,
    )
}

pub fn network() -> NetworkConfig {
    prefnet::simulate::desk_network()
}

pub fn cross_fit(ds: &ConjointDataset, k: usize, seed: u64) -> PreferenceMatrix {
    cross_fit_with(ds, k, seed, &network())
}

pub fn cross_fit_with(
    ds: &ConjointDataset,
    k: usize,
    seed: u64,
    cfg: &NetworkConfig,
) -> PreferenceMatrix {
    let plan = FoldPlan::new(ds.n_respondents(), k, seed).unwrap();
    let cfg = NetworkConfig {
        seed,
        ..cfg.clone()
    };
    crossfit::cross_fit(ds, &cfg, &plan, Exec::available()).unwrap()
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Result of one finite-difference comparison.
pub struct FdReport {
    pub params: usize,
    pub max_rel_error: f64,
}

/// Random small network and dataset; every parameter's analytic gradient
/// compared against a central difference with step `h`.
pub fn finite_difference_check(seed: u64, h: f64) -> FdReport {
    let mut g = rng(seed);
    let p = g.random_range(1..=4);
    let p_z = g.random_range(1..=4);
    let depth = g.random_range(1..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| g.random_range(2..=6)).collect();
    let m = g.random_range(3..=10);
    let t = g.random_range(1..=4);
    let schema = AttributeSchema::binary(p);
    let z = normal_z(&mut g, m, p_z);
    let beta0: Vec<f64> = (0..p).map(|_| g.random_range(-1.0..1.0)).collect();
    let (ds, _) = simulate(&schema, &z, t, seed ^ 0x5eed, |_| beta0.clone());

    let mut net = Network::new(p_z, &hidden, p, seed);
    for layer in net.layers_mut() {
        layer.weights.mapv_inplace(|_| g.random_range(-0.8..0.8));
        layer.bias.mapv_inplace(|_| g.random_range(-0.3..0.3));
    }
    let analytic = net::gradients(&net, &ds).unwrap();
    let mut params = 0;
    let mut worst = 0.0f64;
    for l in 0..net.layers().len() {
        let (rows, cols) = net.layers()[l].weights.dim();
        let mut check = |net: &mut Network, get: &dyn Fn(&mut Network) -> &mut f64, a: f64| {
            let orig = *get(net);
            *get(net) = orig + h;
            let up = net::loss(net, &ds).unwrap();
            *get(net) = orig - h;
            let down = net::loss(net, &ds).unwrap();
            *get(net) = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((a - fd).abs() / (fd.abs() + 1e-8));
            params += 1;
        };
        for r in 0..rows {
            for c in 0..cols {
                let a = analytic.layers[l].weights[[r, c]];
                check(
                    &mut net,
                    &|n: &mut Network| &mut n.layers_mut()[l].weights[[r, c]],
                    a,
                );
            }
            let a = analytic.layers[l].bias[r];
            check(
                &mut net,
                &|n: &mut Network| &mut n.layers_mut()[l].bias[r],
                a,
            );
        }
    }
    FdReport {
        params,
        max_rel_error: worst,
    }
}
