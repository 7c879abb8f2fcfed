//! Command-line front end. Every subcommand is a thin wrapper over the library.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::anomaly::{remove_outliers, ForestConfig};
use crate::data::{
    load_wsdream, make_split, synthesize, write_records, ColdStart, ColdStartMode, Dims, QoSRecord, SparseQoSTensor,
    Split, SplitSpec, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::{confidence_interval, evaluate, median, metrics_from_residuals, CI_LEVELS};
use crate::gmm::{GmmMode, GreysheepReport};
use crate::hypergraph::{build_snapshot, dump_coo};
use crate::model::{
    train, LossKind, ModelConfig, ModelInputs, ModelState, PredictionResult, TrainConfig, EPOCH_LOG_HEADER,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "hctn", version, about = "Temporal QoS prediction toolkit")]
pub struct Cli {
    /// key=value file supplying defaults for flags not given on the command line
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load a QoS file and print its statistics
    Ingest(DataArgs),
    /// Write a synthetic low-rank QoS tensor
    Synth(SynthArgs),
    /// Split a tensor into train / validation / test record files
    Split(SplitCmd),
    /// Train a model and write a checkpoint and the epoch log
    Train(TrainCmd),
    /// Predict every (user, service) pair at the target step
    Predict(PredictCmd),
    /// MAE / RMSE of a prediction file, or confidence intervals over runs
    Evaluate(EvaluateCmd),
    /// Greysheep discrepancy report over a window
    Greysheep(GreysheepCmd),
    /// Isolation-forest scores and the λ-percent removal
    Outliers(OutliersCmd),
    /// Train and test once per value of one hyperparameter
    Sweep(SweepCmd),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// whitespace-separated `user service time value` lines
    #[arg(long)]
    pub data: PathBuf,
    /// inferred from the largest index in the file when omitted
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub services: Option<usize>,
    #[arg(long)]
    pub timesteps: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// prediction step (default: last step)
    #[arg(long)]
    pub target: Option<usize>,
    /// history length τ
    #[arg(long, default_value_t = 4)]
    pub window: usize,
    /// fraction ψ of target-step records used for training
    #[arg(long, default_value_t = 0.3)]
    pub psi: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// CU, CS or CB
    #[arg(long)]
    pub cold_start: Option<ColdStartMode>,
    /// cold-start percent ξ
    #[arg(long, default_value_t = 0.0)]
    pub xi: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 16)]
    pub f1: usize,
    #[arg(long, default_value_t = 128)]
    pub f2: usize,
    #[arg(long, default_value_t = 16)]
    pub f4: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub d_head: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Cauchy scale γ
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// selective, disabled or all
    #[arg(long, default_value = "selective")]
    pub gmm: GmmMode,
    #[arg(long, default_value_t = 1.0)]
    pub c1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c2: f64,
    /// train the factorization features with the network
    #[arg(long)]
    pub unfreeze_gpam: bool,
    #[arg(long, default_value_t = 100)]
    pub nmf_iters: usize,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// cauchy or mse
    #[arg(long, default_value = "cauchy")]
    pub loss: LossKind,
    /// record wall-clock seconds per epoch (breaks byte-identical logs)
    #[arg(long)]
    pub timing: bool,
    /// percent of training records removed as outliers before training
    #[arg(long, default_value_t = 0.0)]
    pub train_lambda: f64,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub users: usize,
    #[arg(long, default_value_t = 15)]
    pub services: usize,
    #[arg(long, default_value_t = 8)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// fraction of greysheep users
    #[arg(long, default_value_t = 0.0)]
    pub greysheep: f64,
    /// fraction of records multiplied by --outlier-factor
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
    #[arg(long, default_value_t = 20.0)]
    pub outlier_factor: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct SplitCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// directory receiving train.txt, val.txt and test.txt
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// epoch log destination (default stdout)
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// write each window step's graphs as coordinate lists
    #[arg(long)]
    pub dump_graphs: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct PredictCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// must match the training seed (it fixes the split and the factorization)
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateCmd {
    /// `user,service,prediction` CSV
    #[arg(long, requires = "truth")]
    pub predictions: Option<PathBuf>,
    /// record file with the ground truth
    #[arg(long, requires = "predictions")]
    pub truth: Option<PathBuf>,
    /// percent of truth records removed as outliers before scoring
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// comma-separated per-run MAEs; prints 90/95/99% intervals
    #[arg(long, value_delimiter = ',')]
    pub runs: Vec<f64>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct GreysheepCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    #[arg(long, default_value_t = 4)]
    pub window: usize,
    #[arg(long, default_value_t = 1.0)]
    pub c1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c2: f64,
}

#[derive(Args, Debug, Clone)]
pub struct OutliersCmd {
    #[command(flatten)]
    pub data: DataArgs,
    /// percent λ of records to remove
    #[arg(long, default_value_t = 5.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    #[arg(long, default_value_t = 256)]
    pub subsample: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct SweepCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// tau, f1, f2, f4, layers, heads, d_head, kernel, dropout, gamma, c, c1,
    /// c2, lr, weight_decay, psi, xi or lambda
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// percent of test records removed as outliers before scoring
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

/// Exit status for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) | Error::Shape { .. } => EXIT_NUMERIC,
        Error::Parse { .. } | Error::Bounds { .. } | Error::Data(_) | Error::Checkpoint { .. } | Error::Io(_) => {
            EXIT_DATA
        }
    }
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Inserts config-file entries as flags unless the flag is given explicitly.
/// Keys the chosen subcommand does not know are an error.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut argv: Vec<String> = args.into_iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    let mut k = 0;
    while k < argv.len() {
        if argv[k] == "--config" && k + 1 < argv.len() {
            path = Some(argv[k + 1].clone());
            argv.drain(k..k + 2);
        } else if let Some(p) = argv[k].strip_prefix("--config=") {
            path = Some(p.to_string());
            argv.remove(k);
        } else {
            k += 1;
        }
    }
    let Some(path) = path else {
        return Ok(argv.into_iter().map(OsString::from).collect());
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("config {path}: {e}")))?;
    let entries = parse_config(&text)?;
    let cmd = Cli::command();
    let sub = argv
        .iter()
        .skip(1)
        .find_map(|a| cmd.find_subcommand(a))
        .ok_or_else(|| Error::Config("no subcommand given".into()))?;
    for (key, value) in entries {
        let flag = format!("--{key}");
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| Error::Config(format!("config key {key:?} is not a flag of `{}`", sub.get_name())))?;
        if argv.iter().any(|a| a == &flag || a.starts_with(&format!("{flag}="))) {
            continue;
        }
        if arg.get_action().takes_values() {
            argv.push(flag);
            argv.push(value);
        } else if value.parse::<bool>().map_err(|_| Error::Config(format!("{key}: expected true/false")))? {
            argv.push(flag);
        }
    }
    Ok(argv.into_iter().map(OsString::from).collect())
}

fn configure_threads() {
    if let Some(n) = std::env::var("HCTN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // fails only if the pool already exists, which is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Entry point: returns the process exit status.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    configure_threads();
    let argv = match expand_config(args.into_iter().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Split(a) => cmd_split(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Greysheep(a) => cmd_greysheep(&a),
        Command::Outliers(a) => cmd_outliers(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            let mut out = std::io::stdout().lock();
            match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
                // a closed pipe (e.g. `| head`) is not an error
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn seed_header(cmd: &str, seed: u64) -> String {
    format!("# hctn {cmd} seed={seed}\n")
}

/// Largest user, service and step index + 1 over the parseable lines.
pub fn infer_dims(path: &Path) -> Result<Dims> {
    let file = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut d = Dims::new(0, 0, 0);
    for line in reader.lines() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            continue;
        }
        if let (Ok(u), Ok(s), Ok(t)) = (f[0].parse::<usize>(), f[1].parse::<usize>(), f[2].parse::<usize>()) {
            d = Dims::new(d.users.max(u + 1), d.services.max(s + 1), d.steps.max(t + 1));
        }
    }
    Ok(d)
}

impl DataArgs {
    pub fn dims(&self) -> Result<Dims> {
        if !self.data.is_file() {
            return Err(Error::Data(format!("{}: no such file", self.data.display())));
        }
        let inferred = if self.users.is_none() || self.services.is_none() || self.timesteps.is_none() {
            infer_dims(&self.data)?
        } else {
            Dims::new(0, 0, 0)
        };
        Ok(Dims::new(
            self.users.unwrap_or(inferred.users),
            self.services.unwrap_or(inferred.services),
            self.timesteps.unwrap_or(inferred.steps),
        ))
    }

    pub fn load(&self) -> Result<SparseQoSTensor> {
        let report = load_wsdream(&self.data, self.dims()?)?;
        if report.rejected > 0 || report.duplicates > 0 {
            eprintln!(
                "note: {} rejected and {} duplicate lines skipped",
                report.rejected, report.duplicates
            );
        }
        Ok(report.tensor)
    }
}

impl SplitArgs {
    pub fn spec(&self, dims: Dims, seed: u64) -> Result<SplitSpec> {
        let target = self.target.unwrap_or(dims.steps.saturating_sub(1));
        let mut spec = SplitSpec::new(self.psi, target, self.window, seed);
        spec.validation_fraction = self.val_fraction;
        spec.cold_start = self.cold_start.map(|mode| ColdStart { mode, xi: self.xi });
        Ok(spec)
    }
}

impl ModelArgs {
    pub fn config(&self, window: usize) -> ModelConfig {
        ModelConfig {
            window,
            f1: self.f1,
            f2: self.f2,
            f4: self.f4,
            layers: self.layers,
            heads: self.heads,
            d_head: self.d_head,
            kernel: self.kernel,
            dropout: self.dropout,
            gamma: self.gamma,
            gmm: self.gmm,
            c1: self.c1,
            c2: self.c2,
            freeze_gpam: !self.unfreeze_gpam,
            nmf_iters: self.nmf_iters,
        }
    }
}

impl OptimArgs {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            max_epochs: self.epochs,
            patience: self.patience,
            loss: self.loss,
            seed,
            timing: self.timing,
            ..Default::default()
        }
    }
}

fn cmd_ingest(a: &DataArgs) -> Result<()> {
    let d = a.dims()?;
    let report = load_wsdream(&a.data, d)?;
    let t = &report.tensor;
    let (lo, hi) = t.value_range().unwrap_or((0.0, 0.0));
    let mut s = String::from("users,services,timesteps,records,density_percent,min,max,rejected,duplicates\n");
    writeln!(
        s,
        "{},{},{},{},{:.4},{},{},{},{}",
        d.users,
        d.services,
        d.steps,
        t.len(),
        100.0 * t.density(),
        lo,
        hi,
        report.rejected,
        report.duplicates
    )
    .unwrap();
    emit(None, &s)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let syn = synthesize(&SynthConfig {
        dims: Dims::new(a.users, a.services, a.timesteps),
        rank: a.rank,
        density: a.density,
        noise: a.noise,
        greysheep_fraction: a.greysheep,
        seed: a.seed,
    })?;
    let mut records = syn.tensor.records().to_vec();
    let planted = if a.outliers > 0.0 {
        crate::data::plant_outliers(&mut records, a.outliers, a.outlier_factor, a.seed ^ 0x5eed)
    } else {
        Vec::new()
    };
    write_records(&a.out, &records)?;
    let grey: Vec<String> = syn.greysheep_users.iter().map(|u| u.to_string()).collect();
    let mut s = seed_header("synth", a.seed);
    s.push_str("records,outliers,greysheep_users\n");
    writeln!(s, "{},{},{}", records.len(), planted.len(), grey.join(" ")).unwrap();
    emit(None, &s)
}

fn split_from(data: &DataArgs, split: &SplitArgs, seed: u64) -> Result<Split> {
    let tensor = data.load()?;
    let spec = split.spec(tensor.dims(), seed)?;
    make_split(&tensor, &spec)
}

fn cmd_split(a: &SplitCmd) -> Result<()> {
    let split = split_from(&a.data, &a.split, a.seed)?;
    fs::create_dir_all(&a.out)?;
    write_records(&a.out.join("train.txt"), split.train.records())?;
    write_records(&a.out.join("val.txt"), &split.val)?;
    write_records(&a.out.join("test.txt"), &split.test)?;
    let mut s = seed_header("split", a.seed);
    s.push_str("train,train_target,val,test,cold_users,cold_services\n");
    writeln!(
        s,
        "{},{},{},{},{},{}",
        split.train.len(),
        split.train_targets().len(),
        split.val.len(),
        split.test.len(),
        split.cold_users.len(),
        split.cold_services.len()
    )
    .unwrap();
    emit(None, &s)
}

/// The split's training tensor with `λ%` of its records dropped as outliers.
fn clean_training(split: &mut Split, lambda: f64, seed: u64) -> Result<()> {
    if lambda <= 0.0 {
        return Ok(());
    }
    let cfg = ForestConfig { seed, ..Default::default() };
    let removal = remove_outliers(split.train.records(), lambda, &cfg)?;
    eprintln!("note: removed {} training records as outliers", removal.removed.len());
    split.train = SparseQoSTensor::new(split.train.dims(), removal.kept)?;
    Ok(())
}

struct Trained {
    split: Split,
    inputs: ModelInputs,
    outcome: crate::model::TrainOutcome,
}

fn train_from(
    data: &DataArgs,
    split_args: &SplitArgs,
    model: &ModelArgs,
    optim: &OptimArgs,
    seed: u64,
) -> Result<Trained> {
    let mut split = split_from(data, split_args, seed)?;
    clean_training(&mut split, optim.train_lambda, seed)?;
    let cfg = model.config(split_args.window);
    cfg.validate()?;
    let tc = optim.config(seed);
    let inputs = ModelInputs::prepare(&split.train, split.spec.window_start(), &cfg, seed)?;
    let outcome = train(&inputs, split.train_targets(), &split.val, &cfg, &tc)?;
    Ok(Trained { split, inputs, outcome })
}

fn cmd_train(a: &TrainCmd) -> Result<()> {
    let t = train_from(&a.data, &a.split, &a.model, &a.optim, a.seed)?;
    if let Some(dir) = &a.dump_graphs {
        fs::create_dir_all(dir)?;
        let start = t.split.spec.window_start();
        for step in start..start + a.split.window {
            dump_coo(dir, &build_snapshot(&t.split.train, step)?)?;
        }
    }
    let mut s = seed_header("train", a.seed);
    s.push_str(EPOCH_LOG_HEADER);
    s.push('\n');
    for row in &t.outcome.log {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    emit(a.log.as_deref(), &s)?;
    if let Some(p) = &a.checkpoint {
        t.outcome.state.save(p)?;
    }
    if !t.split.test.is_empty() {
        let m = evaluate(&t.outcome.state.predict(&t.inputs)?, &t.split.test)?;
        eprintln!(
            "best epoch {}; test mae {:.6} rmse {:.6} over {} records",
            t.outcome.best_epoch, m.mae, m.rmse, m.count
        );
    }
    Ok(())
}

pub fn prediction_csv(pred: &PredictionResult) -> String {
    let mut s = String::from("user,service,prediction\n");
    for u in 0..pred.users {
        for v in 0..pred.services {
            writeln!(s, "{u},{v},{}", pred.get(u, v)).unwrap();
        }
    }
    s
}

/// Reads `user,service,prediction` rows into a dense result.
pub fn read_predictions(path: &Path) -> Result<PredictionResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("user") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        if f.len() != 3 {
            return Err(bad("expected user,service,prediction"));
        }
        let u: usize = f[0].trim().parse().map_err(|_| bad("bad user index"))?;
        let v: usize = f[1].trim().parse().map_err(|_| bad("bad service index"))?;
        let q: f64 = f[2].trim().parse().map_err(|_| bad("bad prediction"))?;
        rows.push((u, v, q));
    }
    let users = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let services = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let mut values = vec![f64::NAN; users * services];
    for (u, v, q) in rows {
        values[u * services + v] = q;
    }
    Ok(PredictionResult {
        users,
        services,
        values,
    })
}

fn cmd_predict(a: &PredictCmd) -> Result<()> {
    let split = split_from(&a.data, &a.split, a.seed)?;
    let state = ModelState::load(&a.checkpoint, None)?;
    if state.config.window != a.split.window {
        return Err(Error::Config(format!(
            "checkpoint window {} differs from --window {}",
            state.config.window, a.split.window
        )));
    }
    let inputs = ModelInputs::prepare(&split.train, split.spec.window_start(), &state.config, a.seed)?;
    let pred = state.predict(&inputs)?;
    let mut s = seed_header("predict", a.seed);
    s.push_str(&prediction_csv(&pred));
    emit(a.out.as_deref(), &s)
}

fn read_records(path: &Path) -> Result<Vec<QoSRecord>> {
    let d = infer_dims(path)?;
    Ok(load_wsdream(path, d)?.tensor.records().to_vec())
}

fn cmd_evaluate(a: &EvaluateCmd) -> Result<()> {
    let mut s = String::new();
    if a.lambda > 0.0 {
        s.push_str(&seed_header("evaluate", a.seed));
    }
    if let (Some(pred), Some(truth)) = (&a.predictions, &a.truth) {
        let pred = read_predictions(pred)?;
        let mut records = read_records(truth)?;
        if a.lambda > 0.0 {
            let cfg = ForestConfig { seed: a.seed, ..Default::default() };
            records = remove_outliers(&records, a.lambda, &cfg)?.kept;
        }
        let m = evaluate(&pred, &records)?;
        s.push_str("count,mae,rmse\n");
        writeln!(s, "{},{},{}", m.count, m.mae, m.rmse).unwrap();
    }
    if !a.runs.is_empty() {
        let k = a.runs.len() as f64;
        let mean = a.runs.iter().sum::<f64>() / k;
        s.push_str("level,runs,mean,low,high\n");
        for level in CI_LEVELS {
            let (lo, hi) = confidence_interval(&a.runs, level)?;
            writeln!(s, "{level:.2},{},{mean},{lo},{hi}", a.runs.len()).unwrap();
        }
    }
    if s.is_empty() {
        return Err(Error::Config("evaluate needs --predictions/--truth or --runs".into()));
    }
    emit(None, &s)
}

fn cmd_greysheep(a: &GreysheepCmd) -> Result<()> {
    let tensor = a.data.load()?;
    let d = tensor.dims();
    if a.window == 0 || a.start + a.window > d.steps {
        return Err(Error::Config(format!(
            "window [{}, {}) outside {} steps",
            a.start,
            a.start + a.window,
            d.steps
        )));
    }
    let rep = GreysheepReport::compute(&tensor, a.start, a.window, a.c1, a.c2);
    let mut s = String::from("entity_kind,entity_id,time_step,gdi,labeled\n");
    for k in 0..rep.window() {
        let t = a.start + k;
        for (u, (g, l)) in rep.gdi_users[k].iter().zip(&rep.labels_users[k]).enumerate() {
            writeln!(s, "user,{u},{t},{g},{}", u8::from(*l)).unwrap();
        }
        for (v, (g, l)) in rep.gdi_services[k].iter().zip(&rep.labels_services[k]).enumerate() {
            writeln!(s, "service,{v},{t},{g},{}", u8::from(*l)).unwrap();
        }
    }
    emit(None, &s)
}

fn cmd_outliers(a: &OutliersCmd) -> Result<()> {
    let tensor = a.data.load()?;
    let cfg = ForestConfig {
        n_trees: a.trees,
        subsample: a.subsample,
        seed: a.seed,
    };
    let removal = remove_outliers(tensor.records(), a.lambda, &cfg)?;
    let mut dropped = vec![false; tensor.len()];
    removal.removed.iter().for_each(|&i| dropped[i] = true);
    let mut s = seed_header("outliers", a.seed);
    s.push_str("user,service,time,value,score,removed\n");
    for ((r, score), d) in tensor.records().iter().zip(&removal.scores).zip(&dropped) {
        writeln!(s, "{},{},{},{},{},{}", r.user, r.service, r.time, r.value, score, u8::from(*d)).unwrap();
    }
    emit(a.out.as_deref(), &s)
}

fn as_count(param: &str, v: f64) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Config(format!("{param} = {v} must be a non-negative integer")));
    }
    Ok(v as usize)
}

/// Copies of the sweep arguments with `param` set to `value`.
fn apply_param(a: &SweepCmd, value: f64) -> Result<(SplitArgs, ModelArgs, OptimArgs, f64)> {
    let (mut sp, mut m, mut o, mut lambda) = (a.split.clone(), a.model.clone(), a.optim.clone(), a.lambda);
    let p = a.param.replace('-', "_");
    match p.as_str() {
        "tau" | "window" => sp.window = as_count(&p, value)?,
        "f1" => m.f1 = as_count(&p, value)?,
        "f2" => m.f2 = as_count(&p, value)?,
        "f4" => m.f4 = as_count(&p, value)?,
        "layers" => m.layers = as_count(&p, value)?,
        "heads" => m.heads = as_count(&p, value)?,
        "d_head" => m.d_head = as_count(&p, value)?,
        "kernel" => m.kernel = as_count(&p, value)?,
        "dropout" => m.dropout = value,
        "gamma" => m.gamma = value,
        "c" => {
            m.c1 = value;
            m.c2 = value;
        }
        "c1" => m.c1 = value,
        "c2" => m.c2 = value,
        "lr" => o.lr = value,
        "weight_decay" => o.weight_decay = value,
        "psi" => sp.psi = value,
        "xi" => sp.xi = value,
        "lambda" => lambda = value,
        _ => return Err(Error::Config(format!("unknown sweep parameter {:?}", a.param))),
    }
    Ok((sp, m, o, lambda))
}

fn sweep_row(a: &SweepCmd, value: f64) -> Result<String> {
    let (sp, m, o, lambda) = apply_param(a, value)?;
    let t = train_from(&a.data, &sp, &m, &o, a.seed)?;
    let mut test = t.split.test.clone();
    if lambda > 0.0 {
        let cfg = ForestConfig { seed: a.seed, ..Default::default() };
        test = remove_outliers(&test, lambda, &cfg)?.kept;
    }
    let pred = t.outcome.state.predict(&t.inputs)?;
    let metrics = evaluate(&pred, &test)?;
    Ok(format!(
        "ok,{},{},{},{},{}",
        metrics.mae,
        metrics.rmse,
        metrics.count,
        t.outcome.best_epoch,
        t.outcome.log.len()
    ))
}

fn cmd_sweep(a: &SweepCmd) -> Result<()> {
    // reject an unknown parameter name before any training
    apply_param(a, a.values[0])?;
    let mut s = seed_header("sweep", a.seed);
    s.push_str("param,value,status,test_mae,test_rmse,count,best_epoch,epochs\n");
    let mut maes = Vec::new();
    for &v in &a.values {
        match sweep_row(a, v) {
            Ok(row) => {
                maes.push(row.split(',').nth(1).and_then(|x| x.parse::<f64>().ok()).unwrap_or(f64::NAN));
                writeln!(s, "{},{v},{row}", a.param).unwrap();
            }
            Err(e @ (Error::Config(_) | Error::Numeric(_) | Error::Data(_))) => {
                let msg = e.to_string().replace(',', ";");
                writeln!(s, "{},{v},error: {msg},,,,,", a.param).unwrap();
            }
            Err(e) => return Err(e),
        }
    }
    if !maes.is_empty() {
        eprintln!("median test mae over {} runs: {:.6}", maes.len(), median(&maes));
    }
    emit(a.out.as_deref(), &s)
}

/// Exposed for tests: MAE/RMSE of residuals, as `evaluate` prints them.
pub fn format_metrics(residuals: &[f64]) -> Result<String> {
    let m = metrics_from_residuals(residuals)?;
    Ok(format!("{},{},{}", m.count, m.mae, m.rmse))
}
