//! Named parameters and the layer helpers every block builds on.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, NodeId, Tensor};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Learnable tensors plus non-learnable buffers (batch-norm running stats).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
}

impl ParamStore {
    fn insert(&mut self, name: String, t: Tensor) {
        let fresh = self.params.insert(name.clone(), t).is_none();
        assert!(fresh, "parameter {name} registered twice");
    }

    pub fn add_dense(&mut self, name: &str, inp: usize, out: usize, bias: bool, rng: &mut ChaCha8Rng) {
        self.insert(format!("{name}.weight"), xavier(rng, &[inp, out], inp, out));
        if bias {
            self.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
        }
    }

    pub fn add_batch_norm(&mut self, name: &str, width: usize) {
        self.insert(format!("{name}.gamma"), Tensor::ones(&[width]));
        self.insert(format!("{name}.beta"), Tensor::zeros(&[width]));
        self.buffers
            .insert(format!("{name}.running_mean"), Tensor::zeros(&[width]));
        self.buffers
            .insert(format!("{name}.running_var"), Tensor::ones(&[width]));
    }

    pub fn add_conv1d(&mut self, name: &str, k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
        self.insert(
            format!("{name}.weight"),
            xavier(rng, &[k, cin, cout], k * cin, k * cout),
        );
        self.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    /// Scoring map of a two-source soft attention.
    pub fn add_soft_attention(&mut self, name: &str, width: usize, rng: &mut ChaCha8Rng) {
        self.add_dense(name, width, 1, true, rng);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Folds the batch statistics of a training pass into the running buffers.
    pub fn update_running_stats(&mut self, updates: &[(String, BatchStats)]) {
        for (name, stats) in updates {
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{name}.{suffix}")) {
                    for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters and buffers in one map, for checkpoints.
    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.params.clone();
        out.extend(self.buffers.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    /// Overwrites every parameter and buffer from `map`; names and shapes must
    /// match this store exactly.
    pub fn load_map(&mut self, mut map: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, slot) in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape(format!("checkpoint/{name}"), slot.shape(), t.shape()));
            }
            *slot = t;
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Config(format!(
                "checkpoint has unexpected tensor {extra}; was it written with another configuration?"
            )));
        }
        Ok(())
    }
}

/// One forward pass: a fresh graph whose parameter leaves are pulled from a
/// store on first use.
pub struct Forward<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    ids: BTreeMap<String, NodeId>,
    pub train: bool,
    seed: u64,
    dropout_calls: u64,
    /// batch statistics seen by training-mode batch norms, by layer name
    pub bn_stats: Vec<(String, BatchStats)>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, train: bool, seed: u64) -> Self {
        Self {
            g: Graph::new(),
            store,
            ids: BTreeMap::new(),
            train,
            seed,
            dropout_calls: 0,
            bn_stats: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let t = self.store.get(name)?.clone();
        let id = self.g.param(name, t)?;
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.params.contains_key(name)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.g.constant(t)
    }

    /// `x · W (+ b)` over the last axis, using `{name}.weight` / `{name}.bias`.
    pub fn dense(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let w = self.param(&format!("{name}.weight"))?;
        let bias_name = format!("{name}.bias");
        let b = if self.has_param(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        self.g.dense(x, w, b).map_err(|e| e.context(name))
    }

    pub fn batch_norm(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        if self.train {
            let (y, stats) = self
                .g
                .batch_norm(x, gamma, beta)
                .map_err(|e| e.context(name))?;
            self.bn_stats.push((name.to_string(), stats));
            Ok(y)
        } else {
            let buf = |suffix: &str| {
                self.store
                    .buffers
                    .get(&format!("{name}.{suffix}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::Config(format!("missing buffer {name}.{suffix}")))
            };
            let stats = BatchStats {
                mean: buf("running_mean")?,
                var: buf("running_var")?,
            };
            self.g
                .batch_norm_eval(x, gamma, beta, &stats)
                .map_err(|e| e.context(name))
        }
    }

    /// Dropout with a mask seeded from the pass seed and the call index.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        let seed = ChaCha8Rng::seed_from_u64(self.seed ^ self.dropout_calls.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .gen::<u64>();
        self.dropout_calls += 1;
        self.g.dropout(x, rate, seed, self.train)
    }

    /// Convex combination of two same-shaped sources. Each row is scored by a
    /// shared map `{name}.weight`, `{name}.bias`; the two scores are softmaxed.
    pub fn soft_attention(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<NodeId> {
        let (alpha_a, alpha_b) = self.soft_attention_weights(a, b, name)?;
        let wa = self.g.mul_col(a, alpha_a)?;
        let wb = self.g.mul_col(b, alpha_b)?;
        self.g.add(wa, wb)
    }

    /// The per-row weights `(α_a, α_b)` used by [`Forward::soft_attention`].
    pub fn soft_attention_weights(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<(NodeId, NodeId)> {
        if self.g.shape(a) != self.g.shape(b) {
            return Err(Error::shape(format!("{name}/soft_attention"), self.g.shape(a), self.g.shape(b)));
        }
        let sa = self.dense(a, name)?;
        let sb = self.dense(b, name)?;
        let axis = self.g.shape(a).len() - 1;
        let scores = self.g.concat(&[sa, sb], axis)?;
        let alpha = self.g.softmax(scores)?;
        let alpha_a = self.g.slice(alpha, axis, 0, 1)?;
        let alpha_b = self.g.slice(alpha, axis, 1, 1)?;
        Ok((alpha_a, alpha_b))
    }

    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.g.param_grads().into_iter().collect()
    }
}
