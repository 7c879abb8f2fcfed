//! The assembled predictor: prediction head, losses, training loop,
//! prediction and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{QoSRecord, SparseQoSTensor, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::gmm::{self, GmmMode, GreysheepReport};
use crate::gpam::{build_initial_embeddings, LatentFeatures, NmfConfig};
use crate::hcfm;
use crate::hypergraph::{build_snapshot, HypergraphSnapshot};
use crate::nn::{Forward, ParamStore};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamW, AdamWConfig, NodeId, Tensor};
use crate::tgem::{self, TgemConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Cauchy,
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cauchy" => Ok(Self::Cauchy),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::Config(format!("unknown loss {s:?} (cauchy, mse)"))),
        }
    }
}

/// Architecture hyperparameters. Everything here is stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub window: usize,
    pub f1: usize,
    pub f2: usize,
    pub f4: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_head: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub gamma: f64,
    pub gmm: GmmMode,
    pub c1: f64,
    pub c2: f64,
    pub freeze_gpam: bool,
    pub nmf_iters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 4,
            f1: 16,
            f2: 128,
            f4: 16,
            layers: 2,
            heads: 4,
            d_head: 8,
            kernel: 3,
            dropout: 0.1,
            gamma: 1.0,
            gmm: GmmMode::Selective,
            c1: 1.0,
            c2: 1.0,
            freeze_gpam: true,
            nmf_iters: 100,
        }
    }
}

impl ModelConfig {
    pub fn tgem(&self) -> TgemConfig {
        TgemConfig {
            f2: self.f2,
            tau: self.window,
            heads: self.heads,
            d_head: self.d_head,
            kernel: self.kernel,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tgem().validate()?;
        if self.f1 == 0 || self.f4 == 0 || self.layers == 0 {
            return Err(Error::Config("f1, f4 and layers must be at least 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("Cauchy scale gamma = {} must be > 0", self.gamma)));
        }
        Ok(())
    }

    fn to_meta(&self, users: usize, services: usize) -> BTreeMap<String, Tensor> {
        let gmm = match self.gmm {
            GmmMode::Selective => 0.0,
            GmmMode::Disabled => 1.0,
            GmmMode::AllEntities => 2.0,
        };
        [
            ("users", users as f64),
            ("services", services as f64),
            ("window", self.window as f64),
            ("f1", self.f1 as f64),
            ("f2", self.f2 as f64),
            ("f4", self.f4 as f64),
            ("layers", self.layers as f64),
            ("heads", self.heads as f64),
            ("d_head", self.d_head as f64),
            ("kernel", self.kernel as f64),
            ("dropout", self.dropout),
            ("gamma", self.gamma),
            ("gmm", gmm),
            ("c1", self.c1),
            ("c2", self.c2),
            ("freeze_gpam", if self.freeze_gpam { 1.0 } else { 0.0 }),
            ("nmf_iters", self.nmf_iters as f64),
        ]
        .into_iter()
        .map(|(k, v)| (format!("meta.{k}"), Tensor::scalar(v)))
        .collect()
    }

    fn from_meta(map: &mut BTreeMap<String, Tensor>) -> Result<(Self, usize, usize)> {
        let mut take = |k: &str| {
            map.remove(&format!("meta.{k}"))
                .map(|t| t.item())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks meta.{k}")))
        };
        let users = take("users")? as usize;
        let services = take("services")? as usize;
        let cfg = Self {
            window: take("window")? as usize,
            f1: take("f1")? as usize,
            f2: take("f2")? as usize,
            f4: take("f4")? as usize,
            layers: take("layers")? as usize,
            heads: take("heads")? as usize,
            d_head: take("d_head")? as usize,
            kernel: take("kernel")? as usize,
            dropout: take("dropout")?,
            gamma: take("gamma")?,
            gmm: match take("gmm")? as u8 {
                0 => GmmMode::Selective,
                1 => GmmMode::Disabled,
                _ => GmmMode::AllEntities,
            },
            c1: take("c1")?,
            c2: take("c2")?,
            freeze_gpam: take("freeze_gpam")? != 0.0,
            nmf_iters: take("nmf_iters")? as usize,
        };
        Ok((cfg, users, services))
    }
}

/// Everything the network reads from the data for one history window.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub users: usize,
    pub services: usize,
    pub start: usize,
    pub latent: LatentFeatures,
    pub snapshots: Vec<HypergraphSnapshot>,
    /// standardized local statistics `[N, τ, 14]`
    pub local: Tensor,
    pub greysheep: GreysheepReport,
}

impl ModelInputs {
    /// Factorizations, graphs, statistics and greysheep labels for the
    /// window `[start, start + cfg.window)`.
    pub fn prepare(tensor: &SparseQoSTensor, start: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let d = tensor.dims();
        let nmf = NmfConfig {
            rank: cfg.f1,
            max_iters: cfg.nmf_iters,
            seed,
            ..Default::default()
        };
        let latent = build_initial_embeddings(tensor, start, cfg.window, &nmf).map_err(|e| e.context("gpam"))?;
        let snapshots = (start..start + cfg.window)
            .map(|t| build_snapshot(tensor, t))
            .collect::<Result<_>>()?;
        let local = gmm::standardize_columns(&gmm::local_features(tensor, start, cfg.window));
        let greysheep = GreysheepReport::compute(tensor, start, cfg.window, cfg.c1, cfg.c2);
        Ok(Self {
            users: d.users,
            services: d.services,
            start,
            latent,
            snapshots,
            local,
            greysheep,
        })
    }

    /// Assembles inputs from externally built parts (used by small fixtures).
    pub fn from_parts(
        latent: LatentFeatures,
        snapshots: Vec<HypergraphSnapshot>,
        local: Tensor,
        greysheep: GreysheepReport,
    ) -> Self {
        Self {
            users: latent.users,
            services: latent.services,
            start: greysheep.start,
            latent,
            snapshots,
            local,
            greysheep,
        }
    }
}

/// Dense `n x m` prediction for the target step.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult {
    pub users: usize,
    pub services: usize,
    pub values: Vec<f64>,
}

impl PredictionResult {
    pub fn get(&self, user: usize, service: usize) -> f64 {
        self.values[user * self.services + service]
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, m) = t.rows_cols()?;
        Ok(Self {
            users: n,
            services: m,
            values: t.data().to_vec(),
        })
    }
}

pub fn init_cqpm(store: &mut ParamStore, f2: usize, f4: usize, rng: &mut ChaCha8Rng) {
    store.add_batch_norm("cqpm.bn", f2);
    store.add_dense("cqpm.hidden", f2, f2, true, rng);
    store.add_dense("cqpm.out", f2, f4, true, rng);
}

/// `(Z_3 + X_3)` → BN → mean over steps → dense (ReLU) → dense → `U Sᵀ`.
/// Returns `(Q̂, U, S)`.
pub fn cqpm_forward(fwd: &mut Forward, z3: NodeId, x3: NodeId, users: usize) -> Result<(NodeId, NodeId, NodeId)> {
    let sum = fwd.g.add(z3, x3).map_err(|e| e.context("cqpm"))?;
    let normed = fwd.batch_norm(sum, "cqpm.bn")?;
    let pooled = fwd.g.mean_axis(normed, 1)?;
    let h = fwd.dense(pooled, "cqpm.hidden")?;
    let h = fwd.g.relu(h)?;
    let emb = fwd.dense(h, "cqpm.out")?;
    let nn = fwd.g.shape(emb)[0];
    let u = fwd.g.slice(emb, 0, 0, users)?;
    let s = fwd.g.slice(emb, 0, users, nn - users)?;
    let st = fwd.g.swap_last2(s)?;
    let q = fwd.g.matmul(u, st)?;
    Ok((q, u, s))
}

/// `mean log(1 + (r / γ)²)` over plain residuals.
pub fn cauchy_loss(residuals: &[f64], gamma: f64) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::Data("loss over an empty record set".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma = {gamma} must be > 0")));
    }
    Ok(residuals.iter().map(|r| (1.0 + (r / gamma).powi(2)).ln()).sum::<f64>() / residuals.len() as f64)
}

/// Loss node over `targets` gathered from `q_hat` (`[n, m]`).
pub fn loss_node(
    fwd: &mut Forward,
    q_hat: NodeId,
    targets: &[QoSRecord],
    kind: LossKind,
    gamma: f64,
) -> Result<NodeId> {
    if targets.is_empty() {
        return Err(Error::Data("loss over an empty record set".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma = {gamma} must be > 0")));
    }
    let m = fwd.g.shape(q_hat)[1];
    let idx: Vec<usize> = targets.iter().map(|r| r.user * m + r.service).collect();
    let pred = fwd.g.gather(q_hat, &idx)?;
    let truth = Tensor::new(&[targets.len()], targets.iter().map(|r| r.value).collect())?;
    let truth = fwd.constant(truth)?;
    let r = fwd.g.sub(pred, truth)?;
    match kind {
        LossKind::Cauchy => {
            let r = fwd.g.scale(r, 1.0 / gamma)?;
            let sq = fwd.g.square(r)?;
            let one_plus = fwd.g.add_scalar(sq, 1.0)?;
            let l = fwd.g.log(one_plus)?;
            fwd.g.mean(l)
        }
        LossKind::Mse => {
            let sq = fwd.g.square(r)?;
            fwd.g.mean(sq)
        }
    }
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// record wall-clock seconds in the epoch log (otherwise 0)
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            max_epochs: 200,
            patience: 10,
            loss: LossKind::Cauchy,
            seed: 42,
            timing: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub users: usize,
    pub services: usize,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub seed: u64,
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ModelState {
    /// Fresh parameters. When the factor features are trainable they are
    /// initialized from `inputs`.
    pub fn init(config: ModelConfig, inputs: &ModelInputs, seed: u64) -> Result<Self> {
        config.validate()?;
        if inputs.latent.window() != config.window || inputs.latent.rank != config.f1 {
            return Err(Error::Config(format!(
                "inputs carry window {} / rank {}, config expects {} / {}",
                inputs.latent.window(),
                inputs.latent.rank,
                config.window,
                config.f1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        hcfm::init_hcfm(&mut store, config.f1, config.f2, config.layers, &mut rng);
        gmm::init_gmm(&mut store, config.f2, config.gmm, &mut rng);
        tgem::init_tgem(&mut store, &config.tgem(), &mut rng);
        init_cqpm(&mut store, config.f2, config.f4, &mut rng);
        if !config.freeze_gpam {
            store.params.insert("gpam.x0".into(), inputs.latent.x0());
        }
        Ok(Self {
            config,
            users: inputs.users,
            services: inputs.services,
            store,
            optimizer: AdamW::default(),
            epoch: 0,
            seed,
        })
    }

    fn check_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        if inputs.users != self.users || inputs.services != self.services {
            return Err(Error::Config(format!(
                "data has {}x{} users/services, model was built for {}x{}",
                inputs.users, inputs.services, self.users, self.services
            )));
        }
        if inputs.snapshots.len() != self.config.window || inputs.latent.rank != self.config.f1 {
            return Err(Error::Config("input window or rank differs from the model".into()));
        }
        Ok(())
    }

    /// Builds the forward graph; returns the pass and the `[n, m]` prediction node.
    pub fn forward<'a>(&'a self, inputs: &ModelInputs, train: bool, pass_seed: u64) -> Result<(Forward<'a>, NodeId)> {
        forward_with(&self.store, &self.config, inputs, train, pass_seed)
    }

    /// Eval-mode prediction (running batch statistics, no dropout).
    pub fn predict(&self, inputs: &ModelInputs) -> Result<PredictionResult> {
        self.check_inputs(inputs)?;
        let (fwd, q) = self.forward(inputs, false, 0)?;
        PredictionResult::from_tensor(fwd.g.value(q))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = self.store.to_map();
        map.extend(self.config.to_meta(self.users, self.services));
        write_checkpoint(path, &map)
    }

    /// Restores a model; the inputs must come from data with the same dims.
    pub fn load(path: &Path, inputs_for_shape: Option<&ModelInputs>) -> Result<Self> {
        let mut map = read_checkpoint(path)?;
        let (config, users, services) = ModelConfig::from_meta(&mut map).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::default();
        hcfm::init_hcfm(&mut store, config.f1, config.f2, config.layers, &mut rng);
        gmm::init_gmm(&mut store, config.f2, config.gmm, &mut rng);
        tgem::init_tgem(&mut store, &config.tgem(), &mut rng);
        init_cqpm(&mut store, config.f2, config.f4, &mut rng);
        if !config.freeze_gpam {
            store.params.insert(
                "gpam.x0".into(),
                Tensor::zeros(&[users + services, config.window, config.f1]),
            );
        }
        store.load_map(map).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let state = Self {
            config,
            users,
            services,
            store,
            optimizer: AdamW::default(),
            epoch: 0,
            seed: 0,
        };
        if let Some(inputs) = inputs_for_shape {
            state.check_inputs(inputs)?;
        }
        Ok(state)
    }
}

/// The full network on a given parameter store.
pub fn forward_with<'a>(
    store: &'a ParamStore,
    cfg: &ModelConfig,
    inputs: &ModelInputs,
    train: bool,
    pass_seed: u64,
) -> Result<(Forward<'a>, NodeId)> {
    let mut fwd = Forward::new(store, train, pass_seed);
    let x0 = if cfg.freeze_gpam {
        fwd.constant(inputs.latent.x0())?
    } else {
        fwd.param("gpam.x0")?
    };
    let (_, y1) = hcfm::hcfm_forward(&mut fwd, &inputs.snapshots, x0, inputs.users, cfg.layers)
        .map_err(|e| e.context("hcfm"))?;
    let x2 = fwd.constant(inputs.local.clone())?;
    let z3 = gmm::inject(&mut fwd, y1, x2, &inputs.greysheep.indicator(), cfg.gmm).map_err(|e| e.context("gmm"))?;
    let x3 = tgem::tgem_forward(&mut fwd, z3, &cfg.tgem()).map_err(|e| e.context("tgem"))?;
    let (q, _, _) = cqpm_forward(&mut fwd, z3, x3, inputs.users).map_err(|e| e.context("cqpm"))?;
    Ok((fwd, q))
}

/// Training loss and parameter gradients for one pass (used by the training
/// loop and by gradient checks).
pub fn loss_and_grads(
    store: &ParamStore,
    cfg: &ModelConfig,
    inputs: &ModelInputs,
    targets: &[QoSRecord],
    kind: LossKind,
    pass_seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor>, Vec<(String, crate::tensor::BatchStats)>)> {
    let (mut fwd, q) = forward_with(store, cfg, inputs, true, pass_seed)?;
    let loss = loss_node(&mut fwd, q, targets, kind, cfg.gamma)?;
    let value = fwd.g.value(loss).item();
    fwd.g.backward(loss)?;
    let grads = fwd.param_grads();
    Ok((value, grads, std::mem::take(&mut fwd.bn_stats)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub seconds: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_mae,val_rmse,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10},{:.10},{:.10},{:.3}",
            self.epoch, self.train_loss, self.val_mae, self.val_rmse, self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// parameters of the best validation epoch
    pub state: ModelState,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Full-batch training with early stopping on validation MAE (or on the
/// training loss when there are no validation records).
pub fn train(
    inputs: &ModelInputs,
    targets: &[QoSRecord],
    val: &[QoSRecord],
    config: &ModelConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut state = ModelState::init(config.clone(), inputs, tc.seed)?;
    state.optimizer = AdamW::new(AdamWConfig {
        lr: tc.lr,
        beta1: tc.beta1,
        beta2: tc.beta2,
        eps: 1e-8,
        weight_decay: tc.weight_decay,
    });
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    for epoch in 1..=tc.max_epochs {
        let started = Instant::now();
        let (loss, grads, stats) = loss_and_grads(&state.store, config, inputs, targets, tc.loss, mix(tc.seed, epoch as u64))
            .map_err(|e| e.context(&format!("epoch {epoch}")))?;
        state.store.update_running_stats(&stats);
        state
            .optimizer
            .step(&mut state.store.params, &grads)
            .map_err(|e| e.context(&format!("epoch {epoch}")))?;
        state.epoch = epoch;
        let (val_mae, val_rmse) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let pred = state.predict(inputs)?;
            let m = evaluate(&pred, val)?;
            (m.mae, m.rmse)
        };
        let seconds = if tc.timing { started.elapsed().as_secs_f64() } else { 0.0 };
        log.push(EpochLog {
            epoch,
            train_loss: loss,
            val_mae,
            val_rmse,
            seconds,
        });
        let score = if val.is_empty() { loss } else { val_mae };
        let improved = best.as_ref().map_or(true, |(b, _, _)| score < *b);
        if improved {
            best = Some((score, state.store.clone(), epoch));
        } else if epoch - best.as_ref().map_or(0, |b| b.2) >= tc.patience {
            break;
        }
    }
    let (_, store, best_epoch) = best.ok_or_else(|| Error::Config("max_epochs must be at least 1".into()))?;
    state.store = store;
    Ok(TrainOutcome {
        state,
        log,
        best_epoch,
    })
}

/// Prepares the inputs from a split and trains.
pub fn train_on_split(split: &Split, config: &ModelConfig, tc: &TrainConfig) -> Result<(ModelInputs, TrainOutcome)> {
    let spec = &split.spec;
    if spec.window != config.window {
        return Err(Error::Config(format!(
            "split window {} differs from model window {}",
            spec.window, config.window
        )));
    }
    let inputs = ModelInputs::prepare(&split.train, spec.window_start(), config, tc.seed)?;
    let outcome = train(&inputs, split.train_targets(), &split.val, config, tc)?;
    Ok((inputs, outcome))
}

/// Metrics of a state on a record set.
pub fn evaluate_state(state: &ModelState, inputs: &ModelInputs, records: &[QoSRecord]) -> Result<Metrics> {
    evaluate(&state.predict(inputs)?, records)
}
