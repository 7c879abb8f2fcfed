//! QoS records, the sparse (user, service, time) tensor, splits and a
//! synthetic generator for fixtures.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QoSRecord {
    pub user: usize,
    pub service: usize,
    pub time: usize,
    pub value: f64,
}

impl QoSRecord {
    pub fn new(user: usize, service: usize, time: usize, value: f64) -> Self {
        Self {
            user,
            service,
            time,
            value,
        }
    }

    fn key(&self) -> (usize, usize, usize) {
        (self.time, self.user, self.service)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub users: usize,
    pub services: usize,
    pub steps: usize,
}

impl Dims {
    pub fn new(users: usize, services: usize, steps: usize) -> Self {
        Self {
            users,
            services,
            steps,
        }
    }

    pub fn cells(&self) -> usize {
        self.users * self.services * self.steps
    }
}

/// Observed records sorted by (time, user, service), at most one per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseQoSTensor {
    dims: Dims,
    records: Vec<QoSRecord>,
    /// `offsets[t]..offsets[t + 1]` indexes the records of step `t`.
    offsets: Vec<usize>,
}

impl SparseQoSTensor {
    /// Validates bounds and positivity; duplicate cells keep the last record.
    pub fn new(dims: Dims, records: Vec<QoSRecord>) -> Result<Self> {
        for r in &records {
            check_bounds(dims, r, 0)?;
            if !(r.value > 0.0 && r.value.is_finite()) {
                return Err(Error::Data(format!(
                    "record ({}, {}, {}) has non-positive or non-finite value {}",
                    r.user, r.service, r.time, r.value
                )));
            }
        }
        Ok(Self::from_valid(dims, records))
    }

    fn from_valid(dims: Dims, mut records: Vec<QoSRecord>) -> Self {
        // stable sort keeps input order within a cell, so the last one wins
        records.sort_by_key(QoSRecord::key);
        let mut dedup: Vec<QoSRecord> = Vec::with_capacity(records.len());
        for r in records {
            match dedup.last_mut() {
                Some(last) if last.key() == r.key() => *last = r,
                _ => dedup.push(r),
            }
        }
        let mut offsets = vec![0; dims.steps + 1];
        for r in &dedup {
            offsets[r.time + 1] += 1;
        }
        for t in 0..dims.steps {
            offsets[t + 1] += offsets[t];
        }
        Self {
            dims,
            records: dedup,
            offsets,
        }
    }

    pub fn empty(dims: Dims) -> Self {
        Self::from_valid(dims, Vec::new())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn records(&self) -> &[QoSRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn density(&self) -> f64 {
        self.records.len() as f64 / self.dims.cells() as f64
    }

    /// Records observed at step `t`, sorted by (user, service).
    pub fn slice(&self, t: usize) -> &[QoSRecord] {
        &self.records[self.offsets[t]..self.offsets[t + 1]]
    }

    pub fn get(&self, user: usize, service: usize, time: usize) -> Option<f64> {
        let s = self.slice(time);
        s.binary_search_by_key(&(user, service), |r| (r.user, r.service))
            .ok()
            .map(|k| s[k].value)
    }

    /// Smallest and largest observed value, if any.
    pub fn value_range(&self) -> Option<(f64, f64)> {
        self.records.iter().fold(None, |acc, r| match acc {
            None => Some((r.value, r.value)),
            Some((lo, hi)) => Some((lo.min(r.value), hi.max(r.value))),
        })
    }

    pub fn filter(&self, keep: impl Fn(&QoSRecord) -> bool) -> Self {
        Self::from_valid(
            self.dims,
            self.records.iter().filter(|r| keep(r)).copied().collect(),
        )
    }
}

fn check_bounds(dims: Dims, r: &QoSRecord, line: usize) -> Result<()> {
    for (axis, index, size) in [
        ("user", r.user, dims.users),
        ("service", r.service, dims.services),
        ("time", r.time, dims.steps),
    ] {
        if index >= size {
            return Err(Error::Bounds {
                line,
                axis,
                index,
                size,
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LoadReport {
    pub tensor: SparseQoSTensor,
    /// Lines whose value was zero or negative; skipped.
    pub rejected: usize,
    /// Cells that appeared more than once; the last line won.
    pub duplicates: usize,
}

pub fn load_wsdream(path: &Path, dims: Dims) -> Result<LoadReport> {
    let file = File::open(path).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", path.display()))
    })?;
    parse_wsdream(BufReader::new(file), dims)
}

/// Parses whitespace-separated `user service time value` lines. Blank lines
/// are ignored.
pub fn parse_wsdream(reader: impl BufRead, dims: Dims) -> Result<LoadReport> {
    let mut records = Vec::new();
    let mut rejected = 0;
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let index = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad {what} index {s:?}"),
            })
        };
        let user = index(fields[0], "user")?;
        let service = index(fields[1], "service")?;
        let time = index(fields[2], "time")?;
        let value: f64 = fields[3].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad value {:?}", fields[3]),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("non-finite value {:?}", fields[3]),
            });
        }
        let rec = QoSRecord::new(user, service, time, value);
        check_bounds(dims, &rec, lineno)?;
        if value <= 0.0 {
            rejected += 1;
            continue;
        }
        records.push(rec);
    }
    let raw = records.len();
    let tensor = SparseQoSTensor::from_valid(dims, records);
    let duplicates = raw - tensor.len();
    Ok(LoadReport {
        tensor,
        rejected,
        duplicates,
    })
}

pub fn write_records(path: &Path, records: &[QoSRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(out, "{} {} {} {}", r.user, r.service, r.time, r.value)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColdStartMode {
    /// remove users
    Users,
    /// remove services
    Services,
    /// remove both
    Both,
}

impl std::str::FromStr for ColdStartMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CU" => Ok(Self::Users),
            "CS" => Ok(Self::Services),
            "CB" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown cold-start mode {s:?} (CU, CS, CB)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColdStart {
    pub mode: ColdStartMode,
    /// percent of users and/or services to empty
    pub xi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub target_time: usize,
    pub window: usize,
    pub seed: u64,
    pub cold_start: Option<ColdStart>,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, target_time: usize, window: usize, seed: u64) -> Self {
        Self {
            train_fraction,
            validation_fraction: 0.2,
            target_time,
            window,
            seed,
            cold_start: None,
        }
    }

    /// First step of the history window.
    pub fn window_start(&self) -> usize {
        self.target_time - self.window
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.window < 1 || self.window > self.target_time {
            return Err(Error::Config(format!(
                "window {} must satisfy 1 <= window <= target time {}",
                self.window, self.target_time
            )));
        }
        if self.target_time >= dims.steps {
            return Err(Error::Config(format!(
                "target time {} outside {} steps",
                self.target_time, dims.steps
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train fraction {} not in (0, 1]",
                self.train_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} not in [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: SparseQoSTensor,
    pub val: Vec<QoSRecord>,
    pub test: Vec<QoSRecord>,
    pub spec: SplitSpec,
    pub cold_users: Vec<usize>,
    pub cold_services: Vec<usize>,
}

impl Split {
    /// Records of the training tensor at the target step; these carry the loss.
    pub fn train_targets(&self) -> &[QoSRecord] {
        self.train.slice(self.spec.target_time)
    }
}

pub fn make_split(tensor: &SparseQoSTensor, spec: &SplitSpec) -> Result<Split> {
    spec.validate(tensor.dims())?;
    let target = tensor.slice(spec.target_time);
    if target.is_empty() {
        return Err(Error::Data(format!(
            "no records at target time {}",
            spec.target_time
        )));
    }
    let count = target.len();
    let observed = (spec.train_fraction * count as f64).round() as usize;
    let n_val = (spec.validation_fraction * observed as f64).round() as usize;
    if observed <= n_val {
        return Err(Error::Config(format!(
            "train fraction {} leaves no training records at the target step",
            spec.train_fraction
        )));
    }
    if observed >= count {
        return Err(Error::Config(format!(
            "train fraction {} leaves an empty test set",
            spec.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let mut val: Vec<QoSRecord> = order[..n_val].iter().map(|&k| target[k]).collect();
    let mut test: Vec<QoSRecord> = order[observed..].iter().map(|&k| target[k]).collect();
    let mut keep = vec![false; count];
    for &k in &order[n_val..observed] {
        keep[k] = true;
    }
    val.sort_by_key(QoSRecord::key);
    test.sort_by_key(QoSRecord::key);

    let mut records: Vec<QoSRecord> = tensor
        .records()
        .iter()
        .filter(|r| r.time != spec.target_time)
        .copied()
        .collect();
    records.extend(
        target
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(r, _)| *r),
    );
    let mut train = SparseQoSTensor::from_valid(tensor.dims(), records);
    let (mut cold_users, mut cold_services) = (Vec::new(), Vec::new());
    if let Some(cs) = spec.cold_start {
        let cold = simulate_cold_start(&train, cs.mode, cs.xi, spec.seed)?;
        train = cold.tensor;
        cold_users = cold.users;
        cold_services = cold.services;
    }
    if train.slice(spec.target_time).is_empty() {
        return Err(Error::Config(
            "cold-start removal left no training records at the target step".into(),
        ));
    }
    Ok(Split {
        train,
        val,
        test,
        spec: spec.clone(),
        cold_users,
        cold_services,
    })
}

#[derive(Clone, Debug)]
pub struct ColdStartResult {
    pub tensor: SparseQoSTensor,
    pub users: Vec<usize>,
    pub services: Vec<usize>,
}

/// `ceil(xi% * count)`, robust to the float error in the percentage product.
fn percent_ceil(xi: f64, count: usize) -> usize {
    let exact = xi * count as f64 / 100.0;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(count)
}

/// Deletes every record of a seeded random subset of users and/or services.
pub fn simulate_cold_start(
    tensor: &SparseQoSTensor,
    mode: ColdStartMode,
    xi: f64,
    seed: u64,
) -> Result<ColdStartResult> {
    if !(0.0..=50.0).contains(&xi) {
        return Err(Error::Config(format!("cold-start percent {xi} not in [0, 50]")));
    }
    let dims = tensor.dims();
    // separate streams so CB picks the same users as CU with the same seed
    let pick = |count: usize, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut ids: Vec<usize> = (0..count).collect();
        ids.shuffle(&mut rng);
        ids.truncate(percent_ceil(xi, count));
        ids.sort_unstable();
        ids
    };
    let users = match mode {
        ColdStartMode::Users | ColdStartMode::Both => pick(dims.users, 1),
        ColdStartMode::Services => Vec::new(),
    };
    let services = match mode {
        ColdStartMode::Services | ColdStartMode::Both => pick(dims.services, 2),
        ColdStartMode::Users => Vec::new(),
    };
    let mut drop_u = vec![false; dims.users];
    users.iter().for_each(|&u| drop_u[u] = true);
    let mut drop_s = vec![false; dims.services];
    services.iter().for_each(|&s| drop_s[s] = true);
    let tensor = tensor.filter(|r| !drop_u[r.user] && !drop_s[r.service]);
    Ok(ColdStartResult {
        tensor,
        users,
        services,
    })
}

/// Multiplies a seeded random `fraction` of `records` by `factor`. Returns the
/// indices that were changed, sorted.
pub fn plant_outliers(records: &mut [QoSRecord], fraction: f64, factor: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate((fraction * records.len() as f64).round() as usize);
    idx.sort_unstable();
    for &k in &idx {
        records[k].value *= factor;
    }
    idx
}

/// Parameters of the synthetic low-rank generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub dims: Dims,
    pub rank: usize,
    /// probability that a cell is observed
    pub density: f64,
    /// relative multiplicative noise amplitude
    pub noise: f64,
    /// fraction of users whose profile is a scaled permutation of another's
    pub greysheep_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: Dims::new(20, 15, 8),
            rank: 2,
            density: 0.5,
            noise: 0.05,
            greysheep_fraction: 0.0,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub tensor: SparseQoSTensor,
    pub greysheep_users: Vec<usize>,
}

/// Non-negative rank-`r` factors with a slow per-step modulation:
/// `q(i,j,t) = sum_k U[i,k] S[j,k] (1 + 0.3 sin(2 pi t / T + phase_k))`.
/// Greysheep users see the services through a private permutation and a
/// private scale, so their rows disagree with the population pattern.
pub fn synthesize(cfg: &SynthConfig) -> Result<Synthetic> {
    let d = cfg.dims;
    if cfg.rank == 0 || d.cells() == 0 {
        return Err(Error::Config("synthetic tensor needs rank >= 1 and non-empty dims".into()));
    }
    if !(cfg.density > 0.0 && cfg.density <= 1.0) {
        return Err(Error::Config(format!("density {} not in (0, 1]", cfg.density)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.rank;
    let u: Vec<f64> = (0..d.users * r).map(|_| rng.gen_range(0.2..1.2)).collect();
    let s: Vec<f64> = (0..d.services * r).map(|_| rng.gen_range(0.2..1.2)).collect();
    let phase: Vec<f64> = (0..r).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();

    let n_grey = (cfg.greysheep_fraction * d.users as f64).round() as usize;
    let mut users: Vec<usize> = (0..d.users).collect();
    users.shuffle(&mut rng);
    let mut greysheep_users: Vec<usize> = users[..n_grey].to_vec();
    greysheep_users.sort_unstable();
    let mut view: Vec<Vec<usize>> = vec![(0..d.services).collect(); d.users];
    let mut scale = vec![1.0; d.users];
    for &g in &greysheep_users {
        view[g].shuffle(&mut rng);
        scale[g] = if rng.gen_bool(0.5) {
            rng.gen_range(2.5..4.0)
        } else {
            rng.gen_range(0.15..0.3)
        };
    }

    let mut records = Vec::new();
    for t in 0..d.steps {
        let w: Vec<f64> = (0..r)
            .map(|k| 1.0 + 0.3 * (std::f64::consts::TAU * t as f64 / d.steps as f64 + phase[k]).sin())
            .collect();
        for i in 0..d.users {
            for j in 0..d.services {
                if !rng.gen_bool(cfg.density) {
                    continue;
                }
                let sj = view[i][j];
                let base: f64 = (0..r).map(|k| u[i * r + k] * s[sj * r + k] * w[k]).sum();
                let noise = 1.0 + cfg.noise * rng.gen_range(-1.0..1.0);
                records.push(QoSRecord::new(i, j, t, base * scale[i] * noise));
            }
        }
    }
    Ok(Synthetic {
        tensor: SparseQoSTensor::new(d, records)?,
        greysheep_users,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims::new(3, 4, 2)
    }

    #[test]
    fn parses_lines_and_skips_invalid_values() {
        let text = "0 1 1 0.345\n\n2 3 0 1.5\n0 1 1 0.5\n1 1 1 0\n1 2 0 -3\n";
        let rep = parse_wsdream(text.as_bytes(), dims()).unwrap();
        assert_eq!(rep.rejected, 2);
        assert_eq!(rep.duplicates, 1);
        assert_eq!(rep.tensor.len(), 2);
        assert_eq!(rep.tensor.get(0, 1, 1), Some(0.5));
        assert_eq!(rep.tensor.get(2, 3, 0), Some(1.5));
        assert_eq!(rep.tensor.get(1, 1, 1), None);
    }

    #[test]
    fn single_line_maps_fields() {
        let rep = parse_wsdream("0 1 1 0.345".as_bytes(), dims()).unwrap();
        assert_eq!(rep.tensor.records(), &[QoSRecord::new(0, 1, 1, 0.345)]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_wsdream("0 1 1 0.3\n0 1 x 0.3\n".as_bytes(), dims()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_wsdream("0 1 1\n".as_bytes(), dims()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match parse_wsdream("0 1 1 1.0\n0 9 1 1.0\n".as_bytes(), dims()) {
            Err(Error::Bounds {
                line, axis, index, ..
            }) => assert_eq!((line, axis, index), (2, "service", 9)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn density_formula() {
        let recs = (0..5).map(|k| QoSRecord::new(k % 3, k % 4, k % 2, 1.0)).collect();
        let t = SparseQoSTensor::new(dims(), recs).unwrap();
        assert!((t.density() - t.len() as f64 / 24.0).abs() < 1e-12);
        assert!(SparseQoSTensor::new(dims(), vec![QoSRecord::new(0, 0, 0, 0.0)]).is_err());
    }

    fn target_tensor(count: usize) -> SparseQoSTensor {
        let d = Dims::new(50, 40, 3);
        let mut recs = Vec::new();
        for k in 0..count {
            recs.push(QoSRecord::new(k / 40, k % 40, 2, 1.0 + k as f64));
            recs.push(QoSRecord::new(k / 40, k % 40, 0, 2.0));
        }
        SparseQoSTensor::new(d, recs).unwrap()
    }

    #[test]
    fn split_counts_and_partition() {
        let t = target_tensor(1000);
        let spec = SplitSpec::new(0.10, 2, 2, 5);
        let s = make_split(&t, &spec).unwrap();
        assert_eq!(s.train_targets().len(), 80);
        assert_eq!(s.val.len(), 20);
        assert_eq!(s.test.len(), 900);
        let mut all: Vec<(usize, usize)> = s
            .train_targets()
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .map(|r| (r.user, r.service))
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 1000);
        assert_eq!(s.train.slice(0).len(), 1000);

        let again = make_split(&t, &spec).unwrap();
        assert_eq!(again.train, s.train);
        assert_eq!(again.test, s.test);
    }

    #[test]
    fn degenerate_fractions_are_config_errors() {
        let t = target_tensor(100);
        assert!(matches!(
            make_split(&t, &SplitSpec::new(1.0, 2, 2, 1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_split(&t, &SplitSpec::new(0.001, 2, 2, 1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_split(&t, &SplitSpec::new(0.5, 2, 3, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cold_start_counts() {
        let d = Dims::new(142, 4500, 1);
        let t = SparseQoSTensor::empty(d);
        assert_eq!(percent_ceil(10.0, 142), 15);
        let r = simulate_cold_start(&t, ColdStartMode::Users, 10.0, 3).unwrap();
        assert_eq!(r.users.len(), 15);
        assert!(r.services.is_empty());
        let r = simulate_cold_start(&t, ColdStartMode::Both, 20.0, 3).unwrap();
        assert_eq!((r.users.len(), r.services.len()), (29, 900));
        let same = simulate_cold_start(&target_tensor(100), ColdStartMode::Users, 0.0, 3).unwrap();
        assert_eq!(same.tensor, target_tensor(100));
        assert!(simulate_cold_start(&t, ColdStartMode::Users, 60.0, 3).is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_positive() {
        let cfg = SynthConfig {
            greysheep_fraction: 0.1,
            ..Default::default()
        };
        let a = synthesize(&cfg).unwrap();
        let b = synthesize(&cfg).unwrap();
        assert_eq!(a.tensor, b.tensor);
        assert_eq!(a.greysheep_users.len(), 2);
        assert!(a.tensor.records().iter().all(|r| r.value > 0.0));
        assert!((a.tensor.density() - 0.5).abs() < 0.1);
    }
}
