//! Greysheep detection (discrepancy index and labeling), local profile
//! statistics, and masked feature injection.

use rand_chacha::ChaCha8Rng;

use crate::data::{QoSRecord, SparseQoSTensor};
use crate::error::{Error, Result};
use crate::nn::{Forward, ParamStore};
use crate::tensor::{NodeId, Tensor};

/// Number of per-profile statistics in [`local_stats`].
pub const N_STATS: usize = 14;

pub const STAT_NAMES: [&str; N_STATS] = [
    "min",
    "max",
    "mean",
    "median",
    "std",
    "skewness",
    "kurtosis",
    "iqr",
    "mean_abs_dev",
    "median_abs_dev",
    "rms",
    "abs_energy",
    "entropy",
    "ptp",
];

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pop_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// `(Σ - max - min) / (count - 2)`, or the plain mean for two or fewer values.
pub fn trimmed_mean(v: &[f64]) -> f64 {
    if v.len() <= 2 {
        return mean(v);
    }
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mn = v.iter().copied().fold(f64::INFINITY, f64::min);
    (v.iter().sum::<f64>() - mx - mn) / (v.len() - 2) as f64
}

/// `1 - (σ - min σ) / (max σ - min σ)` over the entities with a profile;
/// 1 everywhere when the range is zero. Entities without a profile get 1.
fn normalized_consistency(profiles: &[Vec<f64>]) -> Vec<f64> {
    let sd: Vec<Option<f64>> = profiles
        .iter()
        .map(|p| (!p.is_empty()).then(|| pop_std(p)))
        .collect();
    let active = sd.iter().flatten();
    let lo = active.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = active.copied().fold(f64::NEG_INFINITY, f64::max);
    sd.iter()
        .map(|s| match s {
            Some(s) if hi > lo => 1.0 - (s - lo) / (hi - lo),
            _ => 1.0,
        })
        .collect()
}

/// Discrepancy index of every user and service for one slice. Users or
/// services with no records get 0.
pub fn gdi_from_slice(users: usize, services: usize, slice: &[QoSRecord]) -> (Vec<f64>, Vec<f64>) {
    let mut up: Vec<Vec<f64>> = vec![Vec::new(); users];
    let mut sp: Vec<Vec<f64>> = vec![Vec::new(); services];
    for r in slice {
        up[r.user].push(r.value);
        sp[r.service].push(r.value);
    }
    let mu_u: Vec<f64> = up.iter().map(|p| if p.is_empty() { 0.0 } else { mean(p) }).collect();
    let mu_s: Vec<f64> = sp.iter().map(|p| if p.is_empty() { 0.0 } else { mean(p) }).collect();
    let tm_u: Vec<f64> = up.iter().map(|p| if p.is_empty() { 0.0 } else { trimmed_mean(p) }).collect();
    let tm_s: Vec<f64> = sp.iter().map(|p| if p.is_empty() { 0.0 } else { trimmed_mean(p) }).collect();
    let nc_u = normalized_consistency(&up);
    let nc_s = normalized_consistency(&sp);
    let mut gu = vec![0.0; users];
    let mut gs = vec![0.0; services];
    for r in slice {
        let (i, j) = (r.user, r.service);
        gu[i] += (r.value - mu_u[i] - tm_s[j]).abs() * nc_s[j];
        gs[j] += (r.value - mu_s[j] - tm_u[i]).abs() * nc_u[i];
    }
    for (g, p) in gu.iter_mut().zip(&up) {
        if !p.is_empty() {
            *g /= p.len() as f64;
        }
    }
    for (g, p) in gs.iter_mut().zip(&sp) {
        if !p.is_empty() {
            *g /= p.len() as f64;
        }
    }
    (gu, gs)
}

pub fn gdi(tensor: &SparseQoSTensor, t: usize) -> (Vec<f64>, Vec<f64>) {
    let d = tensor.dims();
    gdi_from_slice(d.users, d.services, tensor.slice(t))
}

/// Threshold test `gdi > μ + c σ` with μ, σ over the active entries.
/// Returns the labels and the (μ, σ) used.
pub fn label_step(values: &[f64], active: &[bool], c: f64) -> (Vec<bool>, f64, f64) {
    let pop: Vec<f64> = values
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v)
        .collect();
    if pop.is_empty() {
        return (vec![false; values.len()], 0.0, 0.0);
    }
    let (mu, sd) = (mean(&pop), pop_std(&pop));
    let labels = values
        .iter()
        .zip(active)
        .map(|(&v, &a)| a && v > mu + c * sd)
        .collect();
    (labels, mu, sd)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepThresholds {
    pub mu_user: f64,
    pub sigma_user: f64,
    pub mu_service: f64,
    pub sigma_service: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreysheepReport {
    pub start: usize,
    pub users: usize,
    pub services: usize,
    /// one column per step
    pub gdi_users: Vec<Vec<f64>>,
    pub gdi_services: Vec<Vec<f64>>,
    pub labels_users: Vec<Vec<bool>>,
    pub labels_services: Vec<Vec<bool>>,
    pub thresholds: Vec<StepThresholds>,
    pub c1: f64,
    pub c2: f64,
}

impl GreysheepReport {
    pub fn compute(tensor: &SparseQoSTensor, start: usize, window: usize, c1: f64, c2: f64) -> Self {
        let d = tensor.dims();
        let mut rep = Self {
            start,
            users: d.users,
            services: d.services,
            gdi_users: Vec::new(),
            gdi_services: Vec::new(),
            labels_users: Vec::new(),
            labels_services: Vec::new(),
            thresholds: Vec::new(),
            c1,
            c2,
        };
        for t in start..start + window {
            let slice = tensor.slice(t);
            let (gu, gs) = gdi_from_slice(d.users, d.services, slice);
            let mut au = vec![false; d.users];
            let mut as_ = vec![false; d.services];
            for r in slice {
                au[r.user] = true;
                as_[r.service] = true;
            }
            let (lu, mu_user, sigma_user) = label_step(&gu, &au, c1);
            let (ls, mu_service, sigma_service) = label_step(&gs, &as_, c2);
            rep.gdi_users.push(gu);
            rep.gdi_services.push(gs);
            rep.labels_users.push(lu);
            rep.labels_services.push(ls);
            rep.thresholds.push(StepThresholds {
                mu_user,
                sigma_user,
                mu_service,
                sigma_service,
            });
        }
        rep
    }

    pub fn window(&self) -> usize {
        self.gdi_users.len()
    }

    /// `[N, window, 1]` indicator, users first.
    pub fn indicator(&self) -> Tensor {
        let nn = self.users + self.services;
        let w = self.window();
        Tensor::from_fn(&[nn, w, 1], |k| {
            let (e, t) = (k / w, k % w);
            let lab = if e < self.users {
                self.labels_users[t][e]
            } else {
                self.labels_services[t][e - self.users]
            };
            if lab {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn labeled_count(&self) -> usize {
        self.labels_users
            .iter()
            .chain(&self.labels_services)
            .flatten()
            .filter(|&&l| l)
            .count()
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The 14 statistics of a profile, in [`STAT_NAMES`] order; zeros if empty.
pub fn local_stats(profile: &[f64]) -> [f64; N_STATS] {
    let mut out = [0.0; N_STATS];
    if profile.is_empty() {
        return out;
    }
    let n = profile.len() as f64;
    let mut sorted = profile.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mn, mx) = (sorted[0], sorted[sorted.len() - 1]);
    let m = if mx == mn { mn } else { mean(profile) };
    let median = quantile(&sorted, 0.5);
    let mut sd = pop_std(profile);
    // rounding in the mean leaves a tiny spread on constant profiles
    if mx == mn || sd <= 1e-12 * m.abs().max(1.0) {
        sd = 0.0;
    }
    let (skew, kurt) = if sd == 0.0 {
        (0.0, 0.0)
    } else {
        let m3 = profile.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
        let m4 = profile.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
        (m3 / sd.powi(3), m4 / sd.powi(4) - 3.0)
    };
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let mean_ad = profile.iter().map(|x| (x - m).abs()).sum::<f64>() / n;
    let mut dev: Vec<f64> = profile.iter().map(|x| (x - median).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let median_ad = quantile(&dev, 0.5);
    let energy: f64 = profile.iter().map(|x| x * x).sum();
    let rms = (energy / n).sqrt();
    let entropy = if mx > mn {
        let mut bins = [0usize; 10];
        for &x in profile {
            let b = (((x - mn) / (mx - mn)) * 10.0).floor() as usize;
            bins[b.min(9)] += 1;
        }
        -bins
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    } else {
        0.0
    };
    out.copy_from_slice(&[
        mn, mx, m, median, sd, skew, kurt, iqr, mean_ad, median_ad, rms, energy, entropy,
        mx - mn,
    ]);
    out
}

/// Raw statistics `[N, window, 14]` of every user row and service column per step.
pub fn local_features(tensor: &SparseQoSTensor, start: usize, window: usize) -> Tensor {
    let d = tensor.dims();
    let nn = d.users + d.services;
    let mut out = Tensor::zeros(&[nn, window, N_STATS]);
    for (k, t) in (start..start + window).enumerate() {
        let mut profiles: Vec<Vec<f64>> = vec![Vec::new(); nn];
        for r in tensor.slice(t) {
            profiles[r.user].push(r.value);
            profiles[d.users + r.service].push(r.value);
        }
        for (e, p) in profiles.iter().enumerate() {
            let o = (e * window + k) * N_STATS;
            out.data_mut()[o..o + N_STATS].copy_from_slice(&local_stats(p));
        }
    }
    out
}

/// Standardizes each last-axis column to zero mean and unit variance over all
/// rows; constant columns are only centered.
pub fn standardize_columns(x: &Tensor) -> Tensor {
    let f = *x.shape().last().unwrap_or(&1);
    let rows = x.len() / f.max(1);
    let mut out = x.clone();
    for c in 0..f {
        let col: Vec<f64> = (0..rows).map(|r| x.data()[r * f + c]).collect();
        let (m, s) = (mean(&col), pop_std(&col));
        let s = if s > 0.0 { s } else { 1.0 };
        for r in 0..rows {
            out.data_mut()[r * f + c] = (col[r] - m) / s;
        }
    }
    out
}

/// Which entities receive the injected local features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GmmMode {
    /// greysheep rows take the injected features, others keep Y_1
    Selective,
    /// no injection: Z_3 = Y_1
    Disabled,
    /// every row takes the injected features
    AllEntities,
}

impl std::str::FromStr for GmmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selective" | "on" => Ok(Self::Selective),
            "disabled" | "off" => Ok(Self::Disabled),
            "all" => Ok(Self::AllEntities),
            _ => Err(Error::Config(format!("unknown gmm mode {s:?} (selective, disabled, all)"))),
        }
    }
}

pub fn init_gmm(store: &mut ParamStore, f2: usize, mode: GmmMode, rng: &mut ChaCha8Rng) {
    if mode != GmmMode::Disabled {
        store.add_dense("gmm.inject", f2 + N_STATS, f2, true, rng);
    }
}

/// Keeps the rows of `y` whose indicator is 1 (`y` is `[N, τ, f]`, `g` is
/// `[N, τ, 1]`).
pub fn mask_rows(g: &Tensor, y: &Tensor) -> Tensor {
    let f = *y.shape().last().unwrap();
    Tensor::from_fn(y.shape(), |k| y.data()[k] * g.data()[k / f])
}

/// `Z_3 = (G e) ⊙ Y_3 + (G̃ e) ⊙ Y_1` with `Y_3 = dense([Y_1 ‖ X_2])`.
pub fn inject(fwd: &mut Forward, y1: NodeId, x2: NodeId, g: &Tensor, mode: GmmMode) -> Result<NodeId> {
    let y_shape = fwd.g.shape(y1).to_vec();
    let expected = [y_shape[0], y_shape[1], 1];
    if g.shape() != expected {
        return Err(Error::shape("gmm/indicator", g.shape(), &expected));
    }
    match mode {
        GmmMode::Disabled => Ok(y1),
        GmmMode::AllEntities | GmmMode::Selective => {
            let y2 = fwd.g.concat(&[y1, x2], 2).map_err(|e| e.context("gmm"))?;
            let y3 = fwd.dense(y2, "gmm.inject")?;
            if mode == GmmMode::AllEntities {
                return Ok(y3);
            }
            let gn = fwd.constant(g.clone())?;
            let gc = fwd.constant(g.map(|v| 1.0 - v))?;
            let z1 = fwd.g.mul_col(y3, gn)?;
            let z2 = fwd.g.mul_col(y1, gc)?;
            fwd.g.add(z1, z2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dims;

    fn slice_of(rows: &[&[f64]]) -> Vec<QoSRecord> {
        let mut v = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            for (j, &q) in r.iter().enumerate() {
                v.push(QoSRecord::new(i, j, 0, q));
            }
        }
        v
    }

    #[test]
    fn odd_user_has_the_largest_index() {
        let s = slice_of(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[9.0, 2.0, 3.0]]);
        let (gu, _) = gdi_from_slice(3, 3, &s);
        // service 0 has the only spread, so its weight drops to zero
        assert!((gu[0] - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(gu[0], gu[1]);
        assert!(gu[2] > gu[0]);
    }

    #[test]
    fn identical_rows_give_equal_user_indices() {
        let s = slice_of(&[&[1.0, 5.0, 2.0], &[1.0, 5.0, 2.0], &[1.0, 5.0, 2.0]]);
        let (gu, _) = gdi_from_slice(3, 3, &s);
        assert!(gu.iter().all(|&g| g == gu[0]));
    }

    #[test]
    fn two_user_services_stay_finite() {
        let s = slice_of(&[&[1.0, 4.0], &[3.0, 2.0]]);
        let (gu, gs) = gdi_from_slice(2, 2, &s);
        assert!(gu.iter().chain(&gs).all(|g| g.is_finite()));
    }

    #[test]
    fn labeling_is_strict_and_monotone() {
        let (l, _, sd) = label_step(&[2.0; 5], &[true; 5], 1.0);
        assert_eq!(sd, 0.0);
        assert!(l.iter().all(|&x| !x));
        let v = [0.1, 0.2, 0.3, 2.0, 5.0, 0.2, 0.1];
        let counts: Vec<usize> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&c| label_step(&v, &[true; 7], c).0.iter().filter(|&&x| x).count())
            .collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]));
        let (l, _, _) = label_step(&[0.0, 9.0], &[false, true], 0.0);
        assert!(!l[0]);
    }

    #[test]
    fn stats_of_constant_and_simple_profiles() {
        let c = local_stats(&[0.1, 0.1, 0.1]);
        assert_eq!(&c[..4], &[0.1; 4]);
        assert_eq!(&c[4..8], &[0.0; 4]);
        assert_eq!(c[12], 0.0);
        assert_eq!(c[13], 0.0);

        let s = local_stats(&[1.0, 2.0, 3.0, 4.0]);
        assert!((s[2] - 2.5).abs() < 1e-15);
        assert!((s[4] - 1.25f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[13], 3.0);
        assert_eq!(s[11], 30.0);
        assert!((s[10] - 7.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(local_stats(&[]), [0.0; N_STATS]);
    }

    #[test]
    fn empty_profiles_give_zero_rows() {
        let t = SparseQoSTensor::new(Dims::new(2, 2, 1), vec![QoSRecord::new(0, 0, 0, 1.0)]).unwrap();
        let x = local_features(&t, 0, 1);
        assert_eq!(x.shape(), &[4, 1, N_STATS]);
        assert!(x.data()[N_STATS..2 * N_STATS].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masks_are_complementary() {
        let y = Tensor::from_fn(&[3, 2, 4], |k| k as f64 - 7.5);
        let g = Tensor::from_fn(&[3, 2, 1], |k| (k % 2) as f64);
        let a = mask_rows(&g, &y);
        let b = mask_rows(&g.map(|v| 1.0 - v), &y);
        let sum: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
        assert_eq!(sum, y.data());
    }
}
