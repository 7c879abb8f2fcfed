//! Per-step masked non-negative factorization that seeds the user and
//! service embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{QoSRecord, SparseQoSTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmfConfig {
    pub rank: usize,
    pub max_iters: usize,
    /// stop once the relative objective improvement drops below this
    pub tol: f64,
    pub seed: u64,
    pub eps_div: f64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            max_iters: 100,
            tol: 1e-6,
            seed: 42,
            eps_div: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NmfResult {
    /// `[n, rank]`
    pub xu: Tensor,
    /// `[m, rank]`
    pub xs: Tensor,
    /// masked objective before the first and after every iteration
    pub trace: Vec<f64>,
}

/// Sum over observed cells of `(q - xu_i . xs_j)^2`.
pub fn masked_objective(entries: &[QoSRecord], xu: &Tensor, xs: &Tensor) -> f64 {
    let f = xu.shape()[1];
    entries
        .iter()
        .map(|r| {
            let p = dot(&xu.data()[r.user * f..(r.user + 1) * f], &xs.data()[r.service * f..(r.service + 1) * f]);
            (r.value - p).powi(2)
        })
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn init_factor(rows: usize, rank: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[rows, rank], |_| rng.gen_range(0.1..1.1))
}

fn check_rank(n: usize, m: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > n.min(m) {
        return Err(Error::Config(format!(
            "factor rank {rank} must be in 1..={} for a {n}x{m} slice",
            n.min(m)
        )));
    }
    Ok(())
}

/// Lee-Seung multiplicative updates with the error restricted to observed
/// cells. Rows with no observation keep their initial values.
pub fn masked_nmf(n: usize, m: usize, entries: &[QoSRecord], cfg: &NmfConfig) -> Result<NmfResult> {
    if entries.is_empty() {
        return Err(Error::Data("cannot factorize an empty slice".into()));
    }
    check_rank(n, m, cfg.rank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xu = init_factor(n, cfg.rank, &mut rng);
    let mut xs = init_factor(m, cfg.rank, &mut rng);
    let trace = run_updates(entries, &mut xu, &mut xs, cfg);
    Ok(NmfResult { xu, xs, trace })
}

fn run_updates(entries: &[QoSRecord], xu: &mut Tensor, xs: &mut Tensor, cfg: &NmfConfig) -> Vec<f64> {
    let mut trace = vec![masked_objective(entries, xu, xs)];
    for _ in 0..cfg.max_iters {
        update_side(entries, xu, xs, cfg.eps_div, false);
        update_side(entries, xs, xu, cfg.eps_div, true);
        let cur = masked_objective(entries, xu, xs);
        let prev = *trace.last().unwrap();
        trace.push(cur);
        if cur <= f64::MIN_POSITIVE || (prev - cur) / prev.max(f64::MIN_POSITIVE) < cfg.tol {
            break;
        }
    }
    trace
}

/// One multiplicative update of `a` with `b` fixed. When `transposed`, the
/// record's service indexes `a` and its user indexes `b`.
fn update_side(entries: &[QoSRecord], a: &mut Tensor, b: &Tensor, eps: f64, transposed: bool) {
    let f = a.shape()[1];
    let mut num = vec![0.0; a.len()];
    let mut den = vec![0.0; a.len()];
    let mut seen = vec![false; a.shape()[0]];
    for r in entries {
        let (i, j) = if transposed {
            (r.service, r.user)
        } else {
            (r.user, r.service)
        };
        seen[i] = true;
        let ar = &a.data()[i * f..(i + 1) * f];
        let br = &b.data()[j * f..(j + 1) * f];
        let pred = dot(ar, br);
        for k in 0..f {
            num[i * f + k] += r.value * br[k];
            den[i * f + k] += pred * br[k];
        }
    }
    for (row, &s) in seen.iter().enumerate() {
        if !s {
            continue;
        }
        for k in row * f..(row + 1) * f {
            a.data_mut()[k] *= num[k] / (den[k] + eps);
        }
    }
}

/// Factor pairs for every step of a history window, stored entity-major:
/// `x0()` is `[n + m, window, rank]` with users first.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFeatures {
    pub users: usize,
    pub services: usize,
    pub rank: usize,
    /// one `(xu [n, rank], xs [m, rank])` pair per step
    pub steps: Vec<(Tensor, Tensor)>,
}

impl LatentFeatures {
    pub fn window(&self) -> usize {
        self.steps.len()
    }

    pub fn entities(&self) -> usize {
        self.users + self.services
    }

    /// `[N, window, rank]`.
    pub fn x0(&self) -> Tensor {
        let (nn, w, f) = (self.entities(), self.window(), self.rank);
        let mut out = Tensor::zeros(&[nn, w, f]);
        for (t, (xu, xs)) in self.steps.iter().enumerate() {
            for (e, row) in xu.data().chunks(f).chain(xs.data().chunks(f)).enumerate() {
                let o = (e * w + t) * f;
                out.data_mut()[o..o + f].copy_from_slice(row);
            }
        }
        out
    }

    /// Rebuilds per-step factors from an `[N, window, rank]` tensor.
    pub fn from_x0(users: usize, services: usize, x0: &Tensor) -> Result<Self> {
        let s = x0.shape();
        if s.len() != 3 || s[0] != users + services {
            return Err(Error::shape("latent features", s, &[users + services]));
        }
        let (w, f) = (s[1], s[2]);
        let row = |e: usize, t: usize| &x0.data()[(e * w + t) * f..(e * w + t + 1) * f];
        let steps = (0..w)
            .map(|t| {
                let xu: Vec<f64> = (0..users).flat_map(|e| row(e, t).to_vec()).collect();
                let xs: Vec<f64> = (users..users + services)
                    .flat_map(|e| row(e, t).to_vec())
                    .collect();
                Ok((Tensor::new(&[users, f], xu)?, Tensor::new(&[services, f], xs)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            users,
            services,
            rank: f,
            steps,
        })
    }
}

/// Factorizes every step in `[start, start + window)`. Each step starts from
/// the same seeded initialization; a step with no records keeps it.
pub fn build_initial_embeddings(
    tensor: &SparseQoSTensor,
    start: usize,
    window: usize,
    cfg: &NmfConfig,
) -> Result<LatentFeatures> {
    let d = tensor.dims();
    if window == 0 || start + window > d.steps {
        return Err(Error::Config(format!(
            "window [{start}, {}) outside {} steps",
            start + window,
            d.steps
        )));
    }
    check_rank(d.users, d.services, cfg.rank)?;
    let steps = (start..start + window)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut xu = init_factor(d.users, cfg.rank, &mut rng);
            let mut xs = init_factor(d.services, cfg.rank, &mut rng);
            let slice = tensor.slice(t);
            if !slice.is_empty() {
                run_updates(slice, &mut xu, &mut xs, cfg);
            }
            if !(xu.is_finite() && xs.is_finite()) {
                return Err(Error::Numeric(format!("factorization of step {t}")));
            }
            Ok((xu, xs))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentFeatures {
        users: d.users,
        services: d.services,
        rank: cfg.rank,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dims;

    fn dense(rows: &[&[f64]]) -> Vec<QoSRecord> {
        let mut out = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out.push(QoSRecord::new(i, j, 0, v));
            }
        }
        out
    }

    #[test]
    fn exact_rank_one_recovery() {
        let e = dense(&[&[1.0, 2.0], &[2.0, 4.0]]);
        let cfg = NmfConfig {
            rank: 1,
            max_iters: 1000,
            tol: 0.0,
            ..Default::default()
        };
        let r = masked_nmf(2, 2, &e, &cfg).unwrap();
        assert!(masked_objective(&e, &r.xu, &r.xs) < 1e-6);
    }

    #[test]
    fn constant_matrix_reconstructed() {
        let c = 2.5;
        let e = dense(&[&[c; 3], &[c; 3], &[c; 3]]);
        let cfg = NmfConfig {
            rank: 1,
            max_iters: 1000,
            tol: 0.0,
            ..Default::default()
        };
        let r = masked_nmf(3, 3, &e, &cfg).unwrap();
        for rec in &e {
            let p = r.xu.get(&[rec.user, 0]) * r.xs.get(&[rec.service, 0]);
            assert!((p - c).abs() < 1e-6);
        }
    }

    #[test]
    fn objective_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e: Vec<QoSRecord> = (0..20)
            .map(|k| QoSRecord::new(k % 5, k % 4, 0, rng.gen_range(0.5..2.0)))
            .collect();
        let xu = init_factor(5, 2, &mut rng);
        let xs = init_factor(4, 2, &mut rng);
        let a = masked_objective(&e, &xu, &xs);
        let b = masked_objective(&e, &xu.map(|v| v * 3.0), &xs.map(|v| v / 3.0));
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn errors_on_empty_slice_and_excess_rank() {
        let cfg = NmfConfig::default();
        assert!(matches!(masked_nmf(3, 3, &[], &cfg), Err(Error::Data(_))));
        let e = dense(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let cfg = NmfConfig {
            rank: 3,
            ..Default::default()
        };
        assert!(matches!(masked_nmf(2, 2, &e, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn unobserved_rows_stay_positive() {
        let recs = vec![QoSRecord::new(0, 0, 0, 1.0), QoSRecord::new(1, 1, 0, 2.0)];
        let r = masked_nmf(
            3,
            2,
            &recs,
            &NmfConfig {
                rank: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let row: Vec<f64> = (0..2).map(|k| r.xu.get(&[2, k])).collect();
        assert!(row.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn embeddings_shape_and_identical_steps() {
        let d = Dims::new(4, 3, 2);
        let mut recs = Vec::new();
        for t in 0..2 {
            for (i, j) in [(0, 0), (1, 2), (2, 1), (3, 0), (0, 2)] {
                recs.push(QoSRecord::new(i, j, t, 1.0 + (i + j) as f64));
            }
        }
        let tensor = SparseQoSTensor::new(d, recs).unwrap();
        let cfg = NmfConfig {
            rank: 2,
            ..Default::default()
        };
        let lf = build_initial_embeddings(&tensor, 0, 2, &cfg).unwrap();
        assert_eq!(lf.steps[0], lf.steps[1]);
        let x0 = lf.x0();
        assert_eq!(x0.shape(), &[7, 2, 2]);
        assert_eq!(x0.get(&[4, 1, 1]), lf.steps[1].1.get(&[0, 1]));
        assert_eq!(LatentFeatures::from_x0(4, 3, &x0).unwrap(), lf);
    }
}
