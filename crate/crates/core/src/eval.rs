//! Error metrics, run-level confidence intervals and the plain factorization
//! baseline.

use crate::data::{QoSRecord, SparseQoSTensor};
use crate::error::{Error, Result};
use crate::gpam::{masked_nmf, NmfConfig};
use crate::model::PredictionResult;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

/// MAE and RMSE of prediction-minus-truth residuals.
pub fn metrics_from_residuals(residuals: &[f64]) -> Result<Metrics> {
    if residuals.is_empty() {
        return Err(Error::Data("evaluation over an empty record set".into()));
    }
    let k = residuals.len() as f64;
    let mae = residuals.iter().map(|r| r.abs()).sum::<f64>() / k;
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / k).sqrt();
    if !mae.is_finite() || !rmse.is_finite() {
        return Err(Error::Numeric("non-finite residual in evaluation".into()));
    }
    // rmse >= mae up to rounding
    debug_assert!(rmse >= mae * (1.0 - 1e-12));
    Ok(Metrics {
        mae,
        rmse: rmse.max(mae),
        count: residuals.len(),
    })
}

pub fn evaluate(pred: &PredictionResult, records: &[QoSRecord]) -> Result<Metrics> {
    let mut residuals = Vec::with_capacity(records.len());
    for r in records {
        if r.user >= pred.users || r.service >= pred.services {
            return Err(Error::Data(format!(
                "record ({}, {}) outside the {}x{} prediction",
                r.user, r.service, pred.users, pred.services
            )));
        }
        residuals.push(pred.get(r.user, r.service) - r.value);
    }
    metrics_from_residuals(&residuals)
}

/// Two-sided normal quantile for the supported levels.
pub fn z_value(level: f64) -> Result<f64> {
    match (level * 100.0).round() as u32 {
        90 => Ok(1.645),
        95 => Ok(1.960),
        99 => Ok(2.576),
        _ => Err(Error::Config(format!("confidence level {level} not one of 0.90, 0.95, 0.99"))),
    }
}

pub const CI_LEVELS: [f64; 3] = [0.90, 0.95, 0.99];

/// `mean ± z · std / sqrt(k)` with the sample standard deviation.
pub fn confidence_interval(runs: &[f64], level: f64) -> Result<(f64, f64)> {
    if runs.len() < 2 {
        return Err(Error::Data(format!("confidence interval needs >= 2 runs, got {}", runs.len())));
    }
    let z = z_value(level)?;
    let k = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / k;
    let var = runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let half = z * var.sqrt() / k.sqrt();
    Ok((mean - half, mean + half))
}

/// Run count implied by a reported interval: `k = (z · std / half_width)²`.
pub fn implied_run_count(std: f64, low: f64, high: f64, level: f64) -> Result<f64> {
    let half = (high - low) / 2.0;
    if !(half > 0.0) {
        return Err(Error::Data("interval has no width".into()));
    }
    Ok((z_value(level)? * std / half).powi(2))
}

/// Median of a non-empty list (mean of the two middle values for even sizes).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2.0
    }
}

/// Masked factorization of the training slice at `target` alone, read out at
/// every cell.
pub fn nmf_baseline(train: &SparseQoSTensor, target: usize, cfg: &NmfConfig) -> Result<PredictionResult> {
    let d = train.dims();
    let res = masked_nmf(d.users, d.services, train.slice(target), cfg)?;
    let q = res.xu.matmul(&res.xs.transpose()?)?;
    PredictionResult::from_tensor(&q)
}
