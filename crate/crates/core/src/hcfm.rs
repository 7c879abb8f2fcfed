//! Hypergraph convolution network (one per history step) and the collaborative
//! feature stack with its skip connection.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hypergraph::HypergraphSnapshot;
use crate::nn::{Forward, ParamStore};
use crate::tensor::NodeId;

pub fn init_hcfm(store: &mut ParamStore, f1: usize, f2: usize, layers: usize, rng: &mut ChaCha8Rng) {
    store.add_dense("hcn.in_fig", f1, f2, true, rng);
    store.add_dense("hcn.in_user", f1, f2, true, rng);
    store.add_dense("hcn.in_service", f1, f2, true, rng);
    for i in 1..=layers {
        for branch in ["fig", "user", "service"] {
            store.add_dense(&format!("hcn.{branch}.{i}"), f2, f2, false, rng);
        }
    }
    store.add_soft_attention("hcn.att", f2, rng);
    store.add_dense("hcfm.resize", f1, f2, true, rng);
}

/// `relu(Â · X · W)`.
pub fn graph_conv(fwd: &mut Forward, a_hat: NodeId, x: NodeId, w: NodeId) -> Result<NodeId> {
    let ax = fwd.g.matmul(a_hat, x)?;
    let axw = fwd.g.matmul(ax, w)?;
    fwd.g.relu(axw)
}

/// Weight of layer `i` in the aggregate: 1, 1/2, 1/3, ...
pub fn layer_weight(i: usize) -> f64 {
    1.0 / (i + 1) as f64
}

/// `X_0 + Σ_{i>=1} X_i / (i + 1)`.
pub fn layer_aggregate(fwd: &mut Forward, xs: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = xs
        .split_first()
        .ok_or_else(|| Error::Config("layer aggregate of zero layers".into()))?;
    let mut acc = first;
    for (k, &x) in rest.iter().enumerate() {
        let scaled = fwd.g.scale(x, layer_weight(k + 1))?;
        acc = fwd.g.add(acc, scaled)?;
    }
    Ok(acc)
}

/// Normalized propagation matrices of one step, as graph constants.
pub struct StepGraphs {
    pub a_hat: NodeId,
    pub a_u_hat: NodeId,
    pub a_s_hat: NodeId,
}

impl StepGraphs {
    pub fn new(fwd: &mut Forward, snap: &HypergraphSnapshot) -> Result<Self> {
        Ok(Self {
            a_hat: fwd.constant(snap.a_hat.clone())?,
            a_u_hat: fwd.constant(snap.a_u_hat.clone())?,
            a_s_hat: fwd.constant(snap.a_s_hat.clone())?,
        })
    }
}

/// One HCN block: `x0_t` is `[N, f1]` with users in rows `[0, n)`. Returns
/// `[N, f2]`.
pub fn hcn_forward(
    fwd: &mut Forward,
    graphs: &StepGraphs,
    x0_t: NodeId,
    users: usize,
    layers: usize,
) -> Result<NodeId> {
    let nn = fwd.g.shape(x0_t)[0];
    let xu_t = fwd.g.slice(x0_t, 0, 0, users)?;
    let xs_t = fwd.g.slice(x0_t, 0, users, nn - users)?;
    let mut fig = vec![fwd.dense(x0_t, "hcn.in_fig")?];
    let mut usr = vec![fwd.dense(xu_t, "hcn.in_user")?];
    let mut svc = vec![fwd.dense(xs_t, "hcn.in_service")?];
    for i in 1..=layers {
        let w = fwd.param(&format!("hcn.fig.{i}.weight"))?;
        let next = graph_conv(fwd, graphs.a_hat, fig[i - 1], w).map_err(|e| e.context("fcu"))?;
        fig.push(next);
        let w = fwd.param(&format!("hcn.user.{i}.weight"))?;
        let next = graph_conv(fwd, graphs.a_u_hat, usr[i - 1], w).map_err(|e| e.context("sucu"))?;
        usr.push(next);
        let w = fwd.param(&format!("hcn.service.{i}.weight"))?;
        let next = graph_conv(fwd, graphs.a_s_hat, svc[i - 1], w).map_err(|e| e.context("sscu"))?;
        svc.push(next);
    }
    let hetero = layer_aggregate(fwd, &fig)?;
    let yu = layer_aggregate(fwd, &usr)?;
    let ys = layer_aggregate(fwd, &svc)?;
    let homo = fwd.g.concat(&[yu, ys], 0)?;
    fwd.soft_attention(hetero, homo, "hcn.att")
}

/// Runs one HCN per step of `x0` (`[N, τ, f1]`) and stacks them into
/// `X_1` (`[N, τ, f2]`); returns `(X_1, Y_1 = X_1 + resize(X_0))`.
pub fn hcfm_forward(
    fwd: &mut Forward,
    snapshots: &[HypergraphSnapshot],
    x0: NodeId,
    users: usize,
    layers: usize,
) -> Result<(NodeId, NodeId)> {
    let shape = fwd.g.shape(x0).to_vec();
    if shape.len() != 3 || shape[1] != snapshots.len() {
        return Err(Error::Config(format!(
            "hcfm: {} snapshots for features of shape {shape:?}",
            snapshots.len()
        )));
    }
    let (nn, tau, f1) = (shape[0], shape[1], shape[2]);
    let mut steps = Vec::with_capacity(tau);
    for (t, snap) in snapshots.iter().enumerate() {
        let graphs = StepGraphs::new(fwd, snap)?;
        let x0_t = fwd.g.slice(x0, 1, t, 1)?;
        let x0_t = fwd.g.reshape(x0_t, &[nn, f1])?;
        let x1_t = hcn_forward(fwd, &graphs, x0_t, users, layers)
            .map_err(|e| e.context(&format!("hcn step {t}")))?;
        let f2 = fwd.g.shape(x1_t)[1];
        steps.push(fwd.g.reshape(x1_t, &[nn, 1, f2])?);
    }
    let x1 = fwd.g.concat(&steps, 1)?;
    let skip = fwd.dense(x0, "hcfm.resize")?;
    let y1 = fwd.g.add(x1, skip)?;
    Ok((x1, y1))
}
