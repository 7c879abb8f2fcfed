//! Independent reference implementations and fixtures shared by the
//! integration tests. Nothing here calls the code it checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hctn::data::{make_split, plant_outliers, synthesize, Dims, QoSRecord, SparseQoSTensor, Split, SplitSpec, SynthConfig};
use hctn::gmm::{local_features, standardize_columns, GmmMode, GreysheepReport};
use hctn::gpam::LatentFeatures;
use hctn::hypergraph::build_snapshot;
use hctn::model::{loss_and_grads, train_on_split, LossKind, ModelConfig, ModelInputs, ModelState, TrainConfig, TrainOutcome};
use hctn::nn::ParamStore;
use hctn::tensor::Tensor;

/// Random slice with each cell observed with probability `density`.
pub fn random_cells(n: usize, m: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            if rng.gen::<f64>() < density {
                out.push((i, j, rng.gen_range(0.01..20.0)));
            }
        }
    }
    out
}

pub fn as_records(cells: &[(usize, usize, f64)], t: usize) -> Vec<QoSRecord> {
    cells.iter().map(|&(i, j, v)| QoSRecord::new(i, j, t, v)).collect()
}

/// Straight-line discrepancy index: returns (users, services).
pub fn gdi_oracle(n: usize, m: usize, cells: &[(usize, usize, f64)]) -> (Vec<f64>, Vec<f64>) {
    let q = |i: usize, j: usize| cells.iter().find(|c| c.0 == i && c.1 == j).map(|c| c.2);
    let row = |i: usize| -> Vec<(usize, f64)> { (0..m).filter_map(|j| q(i, j).map(|v| (j, v))).collect() };
    let col = |j: usize| -> Vec<(usize, f64)> { (0..n).filter_map(|i| q(i, j).map(|v| (i, v))).collect() };
    let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let trimmed = |xs: &[f64]| {
        if xs.len() > 2 {
            let mut s = xs.to_vec();
            s.sort_by(f64::total_cmp);
            s[1..s.len() - 1].iter().sum::<f64>() / (s.len() - 2) as f64
        } else {
            avg(xs)
        }
    };
    let sd = |xs: &[f64]| {
        let a = avg(xs);
        (xs.iter().map(|x| (x - a) * (x - a)).sum::<f64>() / xs.len() as f64).sqrt()
    };
    let consistency = |profiles: Vec<Vec<f64>>| -> Vec<f64> {
        let sds: Vec<Option<f64>> = profiles.iter().map(|p| if p.is_empty() { None } else { Some(sd(p)) }).collect();
        let act: Vec<f64> = sds.iter().flatten().copied().collect();
        let (lo, hi) = if act.is_empty() {
            (0.0, 0.0)
        } else {
            (
                act.iter().copied().fold(f64::MAX, f64::min),
                act.iter().copied().fold(f64::MIN, f64::max),
            )
        };
        sds.into_iter()
            .map(|s| match s {
                Some(s) if hi - lo > 0.0 => 1.0 - (s - lo) / (hi - lo),
                _ => 1.0,
            })
            .collect()
    };
    let user_vals: Vec<Vec<f64>> = (0..n).map(|i| row(i).into_iter().map(|x| x.1).collect()).collect();
    let serv_vals: Vec<Vec<f64>> = (0..m).map(|j| col(j).into_iter().map(|x| x.1).collect()).collect();
    let n_hat_s = consistency(serv_vals.clone());
    let n_hat_u = consistency(user_vals.clone());
    let mut gu = vec![0.0; n];
    for i in 0..n {
        let r = row(i);
        if r.is_empty() {
            continue;
        }
        let mu = avg(&user_vals[i]);
        let mut acc = 0.0;
        for (j, v) in &r {
            acc += (v - mu - trimmed(&serv_vals[*j])).abs() * n_hat_s[*j];
        }
        gu[i] = acc / r.len() as f64;
    }
    let mut gs = vec![0.0; m];
    for j in 0..m {
        let c = col(j);
        if c.is_empty() {
            continue;
        }
        let mu = avg(&serv_vals[j]);
        let mut acc = 0.0;
        for (i, v) in &c {
            acc += (v - mu - trimmed(&user_vals[*i])).abs() * n_hat_u[*i];
        }
        gs[j] = acc / c.len() as f64;
    }
    (gu, gs)
}

pub struct BruteGraphs {
    pub a: Vec<Vec<f64>>,
    pub a_u: Vec<Vec<f64>>,
    pub a_s: Vec<Vec<f64>>,
    pub a_hat: Vec<Vec<f64>>,
    pub a_u_hat: Vec<Vec<f64>>,
    pub a_s_hat: Vec<Vec<f64>>,
}

/// Element-by-element evaluation of the graph definitions and normalizations,
/// with self-loop degrees for the FIG and zero degrees clamped to one.
pub fn brute_graphs(h: &[Vec<f64>]) -> BruteGraphs {
    let n = h.len();
    let m = h[0].len();
    let nn = n + m;
    let mut a = vec![vec![0.0; nn]; nn];
    for i in 0..n {
        for j in 0..m {
            if h[i][j] == 1.0 {
                a[i][n + j] = 1.0;
                a[n + j][i] = 1.0;
            }
        }
    }
    let mut a_u = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            if i != k && (0..m).any(|j| h[i][j] == 1.0 && h[k][j] == 1.0) {
                a_u[i][k] = 1.0;
            }
        }
    }
    let mut a_s = vec![vec![0.0; m]; m];
    for j in 0..m {
        for l in 0..m {
            if j != l && (0..n).any(|i| h[i][j] == 1.0 && h[i][l] == 1.0) {
                a_s[j][l] = 1.0;
            }
        }
    }
    let deg = |adj: &Vec<Vec<f64>>, i: usize| adj[i].iter().sum::<f64>();
    let dt: Vec<f64> = (0..nn).map(|i| deg(&a, i) + 1.0).collect();
    let mut a_hat = vec![vec![0.0; nn]; nn];
    for i in 0..nn {
        for j in 0..nn {
            let v = a[i][j] + if i == j { 1.0 } else { 0.0 };
            a_hat[i][j] = v / dt[i].sqrt() / dt[j].sqrt();
        }
    }
    let du: Vec<f64> = (0..n).map(|i| deg(&a_u, i).max(1.0)).collect();
    let ds: Vec<f64> = (0..m).map(|j| deg(&a_s, j).max(1.0)).collect();
    let mut a_u_hat = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let s: f64 = (0..m).map(|j| h[i][j] * h[k][j] / ds[j]).sum();
            a_u_hat[i][k] = s / du[i].sqrt() / du[k].sqrt();
        }
    }
    let mut a_s_hat = vec![vec![0.0; m]; m];
    for j in 0..m {
        for l in 0..m {
            let s: f64 = (0..n).map(|i| h[i][j] * h[i][l] / du[i]).sum();
            a_s_hat[j][l] = s / ds[j].sqrt() / ds[l].sqrt();
        }
    }
    BruteGraphs {
        a,
        a_u,
        a_s,
        a_hat,
        a_u_hat,
        a_s_hat,
    }
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = t.rows_cols().unwrap();
    (0..r).map(|i| (0..c).map(|j| t.get(&[i, j])).collect()).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn is_symmetric(t: &Tensor, tol: f64) -> bool {
    let (r, c) = t.rows_cols().unwrap();
    r == c && (0..r).all(|i| (0..r).all(|j| (t.get(&[i, j]) - t.get(&[j, i])).abs() <= tol))
}

/// The smallest full model: 3 users, 3 services, four steps of history.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        window: 4,
        f1: 4,
        f2: 8,
        f4: 4,
        layers: 1,
        heads: 2,
        d_head: 1,
        kernel: 3,
        dropout: 0.1,
        gamma: 1.0,
        gmm: GmmMode::Selective,
        c1: 0.5,
        c2: 0.5,
        freeze_gpam: true,
        nmf_iters: 50,
    }
}

/// Inputs for [`tiny_config`]. The factor rank exceeds the 3x3 slices, so the
/// latent features are random non-negative values instead of factorizations.
pub fn tiny_problem(seed: u64) -> (ModelConfig, ModelInputs, Vec<QoSRecord>) {
    let cfg = tiny_config();
    let syn = synthesize(&SynthConfig {
        dims: Dims::new(3, 3, 5),
        density: 0.8,
        seed,
        ..Default::default()
    })
    .unwrap();
    let tensor = syn.tensor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let x0 = Tensor::from_fn(&[6, 4, 4], |_| rng.gen_range(0.1..1.0));
    let latent = LatentFeatures::from_x0(3, 3, &x0).unwrap();
    let snapshots = (0..4).map(|t| build_snapshot(&tensor, t).unwrap()).collect();
    let local = standardize_columns(&local_features(&tensor, 0, 4));
    let grey = GreysheepReport::compute(&tensor, 0, 4, cfg.c1, cfg.c2);
    let inputs = ModelInputs::from_parts(latent, snapshots, local, grey);
    let targets = tensor.slice(4).to_vec();
    (cfg, inputs, targets)
}

/// Per parameter tensor: `|g_analytic - g_fd| / max(|g_analytic|, |g_fd|)`
/// (Euclidean norms) with central differences of step `h`, at the initial
/// parameters plus seeded jitter.
pub fn gradient_check(seed: u64, h: f64) -> Vec<(String, f64)> {
    let (cfg, inputs, targets) = tiny_problem(seed);
    let mut state = ModelState::init(cfg.clone(), &inputs, seed).unwrap();
    // zero biases put ReLU inputs exactly on the kink; move to a generic point
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x91);
    for t in state.store.params.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let pass = 99;
    let loss = |store: &ParamStore| loss_and_grads(store, &cfg, &inputs, &targets, LossKind::Cauchy, pass).unwrap().0;
    let (_, grads, _) = loss_and_grads(&state.store, &cfg, &inputs, &targets, LossKind::Cauchy, pass).unwrap();
    let mut out = Vec::new();
    for (name, analytic) in &grads {
        let mut store = state.store.clone();
        let mut fd = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let orig = store.params[name].data()[k];
            store.params.get_mut(name).unwrap().data_mut()[k] = orig + h;
            let up = loss(&store);
            store.params.get_mut(name).unwrap().data_mut()[k] = orig - h;
            let down = loss(&store);
            store.params.get_mut(name).unwrap().data_mut()[k] = orig;
            fd.push((up - down) / (2.0 * h));
        }
        let diff: f64 = analytic.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nf = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nf);
        out.push((name.clone(), if denom < 1e-10 { diff } else { diff / denom }));
    }
    out
}

/// Desk-scale architecture used by the comparative checks.
pub fn small_config(gmm: GmmMode) -> ModelConfig {
    ModelConfig {
        window: 4,
        f1: 4,
        f2: 32,
        f4: 8,
        heads: 2,
        d_head: 4,
        gmm,
        ..Default::default()
    }
}

pub fn small_train(seed: u64, loss: LossKind) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        seed,
        loss,
        max_epochs: 300,
        patience: 30,
        ..Default::default()
    }
}

/// Fully observed low-rank 20x15x8 tensor split at step 7 with a four-step
/// history and 30% of the target step for training. With `outliers`, 5% of
/// the training records are multiplied by 20.
pub fn comparative_split(seed: u64, greysheep: f64, outliers: bool) -> Split {
    let syn = synthesize(&SynthConfig {
        density: 1.0,
        greysheep_fraction: greysheep,
        seed,
        ..Default::default()
    })
    .unwrap();
    let mut split = make_split(&syn.tensor, &SplitSpec::new(0.3, 7, 4, seed)).unwrap();
    if outliers {
        let mut recs = split.train.records().to_vec();
        plant_outliers(&mut recs, 0.05, 20.0, seed + 1000);
        split.train = SparseQoSTensor::new(split.train.dims(), recs).unwrap();
    }
    split
}

pub fn fit(split: &Split, cfg: &ModelConfig, tc: &TrainConfig) -> (ModelInputs, TrainOutcome) {
    train_on_split(split, cfg, tc).unwrap()
}
