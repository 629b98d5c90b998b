use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for each parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched. All gradients are validated before anything is mutated.
pub fn adam_step(state: &mut OptimizerState, params: &mut Params, grads: &Gradients) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                format!("adam:{name}"),
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                node: format!("grad:{name}"),
            });
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    for (name, g) in grads {
        let p: &mut Tensor = params.get_mut(name).expect("validated above");
        let n = p.len();
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> Params {
        let mut p = Params::new();
        p.insert(name, Tensor::scalar(v));
        p
    }

    fn grad(name: &str, v: f64) -> Gradients {
        let mut g = Gradients::new();
        g.insert(name.to_string(), Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single("w", 0.7);
        let mut s = OptimizerState::new(AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut s, &mut p, &grad("w", 0.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let cfg = AdamConfig::default();
        let mut p = single("w", 2.0);
        let mut s = OptimizerState::new(cfg);
        adam_step(&mut s, &mut p, &grad("w", 1.0)).unwrap();
        let expected = 2.0 - cfg.lr / (1.0 + cfg.eps);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let mut a = single("w", 0.3);
        let mut b = a.clone();
        let mut sa = OptimizerState::new(AdamConfig::default());
        let mut sb = sa.clone();
        for g in [0.5, -1.25, 3.0] {
            adam_step(&mut sa, &mut a, &grad("w", g)).unwrap();
            adam_step(&mut sb, &mut b, &grad("w", g)).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn nan_gradient_rejected_before_mutation() {
        let mut p = single("w", 1.0);
        p.insert("u", Tensor::scalar(5.0));
        let mut g = grad("u", 1.0);
        g.insert("w".into(), Tensor::from_parts(vec![1], vec![f64::NAN]));
        let mut s = OptimizerState::new(AdamConfig::default());
        assert!(adam_step(&mut s, &mut p, &g).is_err());
        assert_eq!(p.get("u").unwrap().item(), 5.0);
        assert_eq!(s.step(), 0);
    }
}
