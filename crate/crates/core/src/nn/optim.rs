use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
enum Buffers {
    None,
    Momentum(Vec<f64>),
    Adam { m: Vec<f64>, v: Vec<f64> },
}

/// Optimizer hyperparameters plus per-parameter auxiliary buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step_count: u64,
    buffers: BTreeMap<ParamId, Buffers>,
}

impl OptimizerState {
    /// Allocates buffers for `ids`, shaped like their parameters.
    pub fn new(config: OptimizerConfig, store: &ParamStore, ids: &[ParamId]) -> Self {
        let buffers = ids
            .iter()
            .map(|&id| {
                let n = store.get(id).value.len();
                let b = match config.kind {
                    OptimizerKind::Sgd => Buffers::None,
                    OptimizerKind::SgdMomentum => Buffers::Momentum(vec![0.0; n]),
                    OptimizerKind::Adam => Buffers::Adam {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                };
                (id, b)
            })
            .collect();
        Self {
            config,
            step_count: 0,
            buffers,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Updates every trainable parameter in `ids`, zeroes their gradients and
    /// increments the step count. Non-trainable parameters are left untouched.
    pub fn apply(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for &id in ids {
            let buf = self.buffers.get_mut(&id).ok_or_else(|| {
                Error::Contract(format!(
                    "optimizer has no buffer for parameter `{}`",
                    store.get(id).name
                ))
            })?;
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            match buf {
                Buffers::None => {
                    if c.kind != OptimizerKind::Sgd {
                        return Err(Error::Contract("optimizer buffer kind mismatch".into()));
                    }
                    for (w, g) in value.iter_mut().zip(grad) {
                        *w -= c.learning_rate * g;
                    }
                }
                Buffers::Momentum(vel) => {
                    if vel.len() != value.len() {
                        return Err(Error::Contract("momentum buffer shape mismatch".into()));
                    }
                    for ((w, g), u) in value.iter_mut().zip(grad).zip(vel.iter_mut()) {
                        *u = c.momentum * *u + g;
                        *w -= c.learning_rate * *u;
                    }
                }
                Buffers::Adam { m, v } => {
                    if m.len() != value.len() || v.len() != value.len() {
                        return Err(Error::Contract("adam buffer shape mismatch".into()));
                    }
                    for (((w, &g), mi), vi) in value
                        .iter_mut()
                        .zip(grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                        let m_hat = *mi / bias1;
                        let v_hat = *vi / bias2;
                        *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
            }
            p.grad.data_mut().fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(grad);
        (s, id)
    }

    #[test]
    fn sgd_hand_arithmetic() {
        let (mut s, id) = single(1.0, 2.0);
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1), &s, &[id]);
        opt.apply(&mut s, &[id]).unwrap();
        assert!((s.get(id).value.item() - 0.8).abs() < 1e-15);
        assert_eq!(s.get(id).grad.item(), 0.0);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_value() {
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::adam(0.1)] {
            let (mut s, id) = single(1.25, 0.0);
            let mut opt = OptimizerState::new(cfg, &s, &[id]);
            opt.apply(&mut s, &[id]).unwrap();
            assert_eq!(s.get(id).value.item(), 1.25);
        }
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic() {
        // f(w) = 0.5 * a * (w - c)^2
        let (a, c) = (3.0, -0.7);
        let cfg = OptimizerConfig::adam(0.05);
        let (mut s, id) = single(2.0, 0.0);
        let mut opt = OptimizerState::new(cfg.clone(), &s, &[id]);

        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = a * (s.get(id).value.item() - c);
            s.get_mut(id).grad = Tensor::scalar(g);
            opt.apply(&mut s, &[id]).unwrap();

            let gr = a * (w - c);
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((s.get(id).value.item() - w).abs() <= 1e-10, "step {t}");
        }
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let (mut s, id) = single(0.5, 1.0);
        s.set_trainable(&[id], false);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.1), &s, &[id]);
        opt.apply(&mut s, &[id]).unwrap();
        assert_eq!(s.get(id).value.item().to_bits(), 0.5f64.to_bits());
    }

    #[test]
    fn missing_buffer_is_reported() {
        let (mut s, id) = single(0.5, 1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.1), &s, &[]);
        assert!(matches!(opt.apply(&mut s, &[id]), Err(Error::Contract(_))));
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut cfg = OptimizerConfig::sgd(0.1);
        cfg.kind = OptimizerKind::SgdMomentum;
        let (mut s, id) = single(0.0, 1.0);
        let mut opt = OptimizerState::new(cfg, &s, &[id]);
        opt.apply(&mut s, &[id]).unwrap();
        s.get_mut(id).grad = Tensor::scalar(1.0);
        opt.apply(&mut s, &[id]).unwrap();
        // velocities 1.0 then 1.9
        assert!((s.get(id).value.item() + 0.29).abs() < 1e-12);
    }
}
