//! Temporal feature extraction: attention encoder (E-block), temporal
//! convolution path (T-block), per-step dense path (F-block) and their fusion.
//!
//! Tensors are laid out `[N, τ, f]` (entity, step, feature).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Forward, ParamStore};
use crate::tensor::{NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TgemConfig {
    pub f2: usize,
    pub tau: usize,
    pub heads: usize,
    pub d_head: usize,
    pub kernel: usize,
    pub dropout: f64,
}

impl TgemConfig {
    pub fn reduced(&self) -> usize {
        self.f2 / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.f2 == 0 || self.f2 % 4 != 0 {
            return Err(Error::Config(format!("f2 = {} must be a positive multiple of 4", self.f2)));
        }
        if self.heads * self.d_head != self.f2 / 4 {
            return Err(Error::Config(format!(
                "heads ({}) x head width ({}) must equal f2/4 = {}",
                self.heads,
                self.d_head,
                self.f2 / 4
            )));
        }
        if self.tau == 0 || self.tau % 4 != 0 {
            return Err(Error::Config(format!(
                "window tau = {} must be a positive multiple of 4",
                self.tau
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub fn init_tgem(store: &mut ParamStore, cfg: &TgemConfig, rng: &mut ChaCha8Rng) {
    let (f2, r, hd) = (cfg.f2, cfg.reduced(), cfg.heads * cfg.d_head);
    store.add_batch_norm("tgem.bn_in", f2);
    store.add_dense("tgem.reduce", f2, r, true, rng);
    store.add_batch_norm("tgem.bn_reduce", r);
    for p in ["q", "k", "v"] {
        store.add_dense(&format!("tgem.mha.{p}"), r, hd, true, rng);
    }
    store.add_dense("tgem.mha.out", hd, r, true, rng);
    store.add_dense("tgem.restore", r, f2, true, rng);
    store.add_batch_norm("tgem.bn_out", f2);
    store.add_conv1d("tgem.t.conv1", cfg.kernel, cfg.tau, cfg.tau / 4, rng);
    store.add_conv1d("tgem.t.conv2", cfg.kernel, cfg.tau / 4, cfg.tau, rng);
    store.add_dense("tgem.f.dense1", f2, r, true, rng);
    store.add_dense("tgem.f.dense2", r, f2, true, rng);
    store.add_soft_attention("tgem.fuse", f2, rng);
}

/// Sinusoidal encoding `[τ, width]`: sin on even columns, cos on odd ones.
pub fn positional_encoding(tau: usize, width: usize) -> Result<Tensor> {
    if width % 2 != 0 {
        return Err(Error::Config(format!("positional encoding width {width} must be even")));
    }
    Ok(Tensor::from_fn(&[tau, width], |k| {
        let (pos, c) = (k / width, k % width);
        let i = c / 2;
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / width as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// `softmax(Q Kᵀ / √d_k) V` per batch entry; inputs are `[B, τ, d]`.
/// Returns the output and the attention weights `[B, τ, τ]`.
pub fn scaled_dot_attention(fwd: &mut Forward, q: NodeId, k: NodeId, v: NodeId) -> Result<(NodeId, NodeId)> {
    let (qs, ks) = (fwd.g.shape(q).to_vec(), fwd.g.shape(k).to_vec());
    if qs.len() != 3 || qs[2] != ks[2] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let kt = fwd.g.swap_last2(k)?;
    let scores = fwd.g.batch_matmul(q, kt)?;
    let scores = fwd.g.scale(scores, 1.0 / (qs[2] as f64).sqrt())?;
    let weights = fwd.g.softmax(scores)?;
    let out = fwd.g.batch_matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention over the step axis of `[N, τ, f2/4]`, with weights
/// shared across entities. Returns the output and each head's weights.
pub fn mha(fwd: &mut Forward, x: NodeId, heads: usize, d_head: usize) -> Result<(NodeId, Vec<NodeId>)> {
    let q = fwd.dense(x, "tgem.mha.q")?;
    let k = fwd.dense(x, "tgem.mha.k")?;
    let v = fwd.dense(x, "tgem.mha.v")?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = fwd.g.slice(q, 2, h * d_head, d_head)?;
        let kh = fwd.g.slice(k, 2, h * d_head, d_head)?;
        let vh = fwd.g.slice(v, 2, h * d_head, d_head)?;
        let (o, w) = scaled_dot_attention(fwd, qh, kh, vh)?;
        outs.push(o);
        weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { fwd.g.concat(&outs, 2)? };
    Ok((fwd.dense(cat, "tgem.mha.out")?, weights))
}

/// BN → +PE → reduce → BN → MHA → restore → + BN(input) → BN.
pub fn e_block(fwd: &mut Forward, z3: NodeId, cfg: &TgemConfig) -> Result<NodeId> {
    let shape = fwd.g.shape(z3).to_vec();
    let (nn, tau, f2) = (shape[0], shape[1], shape[2]);
    let b1 = fwd.batch_norm(z3, "tgem.bn_in")?;
    let pe = positional_encoding(tau, f2)?;
    let tiled = Tensor::from_fn(&[nn, tau, f2], |k| pe.data()[k % (tau * f2)]);
    let pe = fwd.constant(tiled)?;
    let z4 = fwd.g.add(b1, pe)?;
    let reduced = fwd.dense(z4, "tgem.reduce")?;
    let z5 = fwd.batch_norm(reduced, "tgem.bn_reduce")?;
    let (z6, _) = mha(fwd, z5, cfg.heads, cfg.d_head).map_err(|e| e.context("mha"))?;
    let restored = fwd.dense(z6, "tgem.restore")?;
    let z7 = fwd.g.add(restored, b1)?;
    fwd.batch_norm(z7, "tgem.bn_out")
}

/// Two convolutions along the feature axis with the steps as channels
/// (τ → τ/4 → τ), dropout between, plus the residual.
pub fn t_block(fwd: &mut Forward, z8: NodeId, cfg: &TgemConfig) -> Result<NodeId> {
    let by_feature = fwd.g.swap_last2(z8)?;
    let w1 = fwd.param("tgem.t.conv1.weight")?;
    let b1 = fwd.param("tgem.t.conv1.bias")?;
    let h = fwd.g.conv1d(by_feature, w1, b1).map_err(|e| e.context("t-block"))?;
    let h = fwd.dropout(h, cfg.dropout)?;
    let w2 = fwd.param("tgem.t.conv2.weight")?;
    let b2 = fwd.param("tgem.t.conv2.bias")?;
    let h = fwd.g.conv1d(h, w2, b2).map_err(|e| e.context("t-block"))?;
    let back = fwd.g.swap_last2(h)?;
    fwd.g.add(back, z8)
}

/// Per-step dense pair f2 → f2/4 → f2 with ReLU, dropout between, plus the residual.
pub fn f_block(fwd: &mut Forward, z8: NodeId, cfg: &TgemConfig) -> Result<NodeId> {
    let h = fwd.dense(z8, "tgem.f.dense1")?;
    let h = fwd.g.relu(h)?;
    let h = fwd.dropout(h, cfg.dropout)?;
    let h = fwd.dense(h, "tgem.f.dense2")?;
    let h = fwd.g.relu(h)?;
    fwd.g.add(h, z8)
}

/// `Z_3` → `X_3`, same shape.
pub fn tgem_forward(fwd: &mut Forward, z3: NodeId, cfg: &TgemConfig) -> Result<NodeId> {
    let shape = fwd.g.shape(z3).to_vec();
    if shape.len() != 3 || shape[1] != cfg.tau || shape[2] != cfg.f2 {
        return Err(Error::shape("tgem", &shape, &[0, cfg.tau, cfg.f2]));
    }
    let z8 = e_block(fwd, z3, cfg).map_err(|e| e.context("e-block"))?;
    let zt = t_block(fwd, z8, cfg)?;
    let zf = f_block(fwd, z8, cfg).map_err(|e| e.context("f-block"))?;
    fwd.soft_attention(zt, zf, "tgem.fuse")
}
