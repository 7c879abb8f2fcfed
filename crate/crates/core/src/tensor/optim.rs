use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name and
/// created as zeros on first use.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    /// Nothing is modified if any gradient is non-finite or mis-shaped.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("adamw/{name}"), p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("gradient of parameter {name}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                *pv *= 1.0 - c.lr * c.weight_decay;
                *pv -= c.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
            }
            if !p.is_finite() {
                return Err(Error::Numeric(format!("parameter {name} after update")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        let mut p = single("w", 1.5);
        for _ in 0..3 {
            opt.step(&mut p, &single("w", 0.0)).unwrap();
        }
        assert_eq!(p["w"].item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        let mut p = single("w", 1.0);
        opt.step(&mut p, &single("w", 1.0)).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p["w"].item() - expected).abs() < 1e-15);
        assert!((p["w"].item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut opt = AdamW::new(cfg(0.1, 0.1));
        let mut p = single("w", 1.0);
        opt.step(&mut p, &single("w", 0.0)).unwrap();
        assert!((p["w"].item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        let mut p = single("layer.weight", 1.0);
        let err = opt.step(&mut p, &single("layer.weight", f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
        assert_eq!(p["layer.weight"].item(), 1.0);
        assert_eq!(opt.steps(), 0);
    }
}
