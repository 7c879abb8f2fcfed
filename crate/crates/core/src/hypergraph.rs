//! Per-step invocation graphs: the first-order user-service graph (FIG), the
//! second-order user-user (SUIG) and service-service (SSIG) graphs, and their
//! normalized propagation matrices.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::SparseQoSTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct HypergraphSnapshot {
    pub t: usize,
    /// `[n + m, n + m]` binary FIG adjacency, users first
    pub a: Tensor,
    /// `[n, m]` binary incidence
    pub h: Tensor,
    /// `[n, n]` binary SUIG adjacency
    pub a_u: Tensor,
    /// `[m, m]` binary SSIG adjacency
    pub a_s: Tensor,
    pub a_hat: Tensor,
    pub a_u_hat: Tensor,
    pub a_s_hat: Tensor,
}

impl HypergraphSnapshot {
    pub fn users(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn services(&self) -> usize {
        self.h.shape()[1]
    }
}

pub fn incidence(tensor: &SparseQoSTensor, t: usize) -> Result<Tensor> {
    let d = tensor.dims();
    if t >= d.steps {
        return Err(Error::Config(format!("step {t} outside {} steps", d.steps)));
    }
    let mut h = Tensor::zeros(&[d.users, d.services]);
    for r in tensor.slice(t) {
        h.set(&[r.user, r.service], 1.0);
    }
    Ok(h)
}

pub fn build_snapshot(tensor: &SparseQoSTensor, t: usize) -> Result<HypergraphSnapshot> {
    Ok(snapshot_from_incidence(incidence(tensor, t)?, t))
}

/// Binary co-occurrence: `sign(M Mᵀ)` with a zeroed diagonal.
fn co_occurrence(m: &Tensor) -> Tensor {
    let (r, _) = m.rows_cols().expect("2-D");
    let mut out = m.matmul(&m.transpose().expect("2-D")).expect("conformable");
    for i in 0..r {
        for k in 0..r {
            let v = if i != k && out.get(&[i, k]) > 0.0 { 1.0 } else { 0.0 };
            out.set(&[i, k], v);
        }
    }
    out
}

pub fn snapshot_from_incidence(h: Tensor, t: usize) -> HypergraphSnapshot {
    let (n, m) = h.rows_cols().expect("incidence is 2-D");
    let nn = n + m;
    let mut a = Tensor::zeros(&[nn, nn]);
    for i in 0..n {
        for j in 0..m {
            if h.get(&[i, j]) != 0.0 {
                a.set(&[i, n + j], 1.0);
                a.set(&[n + j, i], 1.0);
            }
        }
    }
    let a_u = co_occurrence(&h);
    let a_s = co_occurrence(&h.transpose().expect("2-D"));
    let a_hat = normalize_fig(&a);
    let (a_u_hat, a_s_hat) = normalize_second_order(&h, &a_u, &a_s);
    HypergraphSnapshot {
        t,
        a,
        h,
        a_u,
        a_s,
        a_hat,
        a_u_hat,
        a_s_hat,
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degrees of `A + I`.
pub fn normalize_fig(a: &Tensor) -> Tensor {
    let (nn, _) = a.rows_cols().expect("square");
    let deg: Vec<f64> = (0..nn)
        .map(|i| 1.0 + (0..nn).map(|j| a.get(&[i, j])).sum::<f64>())
        .collect();
    Tensor::from_fn(&[nn, nn], |k| {
        let (i, j) = (k / nn, k % nn);
        let v = a.get(&[i, j]) + if i == j { 1.0 } else { 0.0 };
        v / (deg[i] * deg[j]).sqrt()
    })
}

fn clamped_degrees(adj: &Tensor) -> Vec<f64> {
    let (r, c) = adj.rows_cols().expect("2-D");
    (0..r)
        .map(|i| (0..c).map(|j| adj.get(&[i, j])).sum::<f64>().max(1.0))
        .collect()
}

/// `Â_u = D_u^{-1/2} H D_s^{-1} Hᵀ D_u^{-1/2}` and the service analogue, with
/// `D_u`, `D_s` the degrees of `A_u`, `A_s` and zero degrees clamped to one.
pub fn normalize_second_order(h: &Tensor, a_u: &Tensor, a_s: &Tensor) -> (Tensor, Tensor) {
    let du = clamped_degrees(a_u);
    let ds = clamped_degrees(a_s);
    let ht = h.transpose().expect("2-D");
    (gram(h, &ds, &du), gram(&ht, &du, &ds))
}

/// `diag(outer)^{-1/2} M diag(inner)^{-1} Mᵀ diag(outer)^{-1/2}`, computed as
/// the Gram matrix of `M diag(inner)^{-1/2}` so the result is exactly symmetric.
fn gram(mat: &Tensor, inner: &[f64], outer: &[f64]) -> Tensor {
    let (_, c) = mat.rows_cols().expect("2-D");
    let b = Tensor::from_fn(mat.shape(), |k| mat.data()[k] / inner[k % c].sqrt());
    let mut g = b.matmul(&b.transpose().expect("2-D")).expect("conformable");
    let r = outer.len();
    for (k, v) in g.data_mut().iter_mut().enumerate() {
        *v /= (outer[k / r] * outer[k % r]).sqrt();
    }
    g
}

fn dump_one(path: &Path, m: &Tensor) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let (r, c) = m.rows_cols()?;
    writeln!(out, "# {r} {c}")?;
    for i in 0..r {
        for j in 0..c {
            let v = m.get(&[i, j]);
            if v != 0.0 {
                writeln!(out, "{i} {j} {v}")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes `A`, `H`, `A_u`, `A_s` of a snapshot as coordinate lists
/// (`row col value`, non-zeros only) into `dir`.
pub fn dump_coo(dir: &Path, snap: &HypergraphSnapshot) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, m) in [
        ("A", &snap.a),
        ("H", &snap.h),
        ("A_u", &snap.a_u),
        ("A_s", &snap.a_s),
    ] {
        dump_one(&dir.join(format!("t{}_{name}.coo", snap.t)), m)?;
    }
    Ok(())
}
