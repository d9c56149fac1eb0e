use serde::{Deserialize, Serialize};

use crate::error::{LunaError, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

/// Adam with linear warmup, linear decay and global-norm clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Step at which the rate has decayed to zero.
    pub total_steps: u64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            warmup_steps: 50,
            total_steps: 1000,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LunaError::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(LunaError::Config("betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.clip_norm < 0.0 || self.weight_decay < 0.0 {
            return Err(LunaError::Config("eps must be positive; clip_norm and weight_decay non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate applied by update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps) + 1;
        let left = (self.total_steps + 1).saturating_sub(step);
        self.lr * left as f64 / span as f64
    }
}

/// Moment buffers, aligned with the parameter store by index.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// What one update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Update {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Ok(OptimizerState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn check_shapes(&self, store: &ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(LunaError::Contract(format!(
                "optimizer holds {} buffers for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for ((_, name, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(LunaError::Contract(format!("moment buffers for {name} do not match its shape")));
            }
        }
        Ok(())
    }

    /// Clips, applies one Adam step from the gradients in `store`, and advances the schedule.
    pub fn apply(&mut self, store: &mut ParamStore<T>) -> Result<Update> {
        self.check_shapes(store)?;
        let grad_norm = store.global_grad_norm();
        if !grad_norm.is_finite() {
            return Err(LunaError::NonFinite(format!("gradient norm is {grad_norm} at step {}", self.step + 1)));
        }
        let c = &self.config;
        let clip = if c.clip_norm > 0.0 && grad_norm > c.clip_norm {
            c.clip_norm / (grad_norm + 1e-6)
        } else {
            1.0
        };
        self.step += 1;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            let grad: Vec<f64> = match param.grad() {
                Some(g) => g.iter().map(|x| x.to_f64_lossy() * clip).collect(),
                None => continue,
            };
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let data = param.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                let mi = c.beta1 * m[i].to_f64_lossy() + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v[i].to_f64_lossy() + (1.0 - c.beta2) * g * g;
                m[i] = T::from_f64_lossy(mi);
                v[i] = T::from_f64_lossy(vi);
                if lr == 0.0 {
                    continue;
                }
                let mut w = data[i].to_f64_lossy();
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps) + c.weight_decay * w;
                w -= lr * update;
                data[i] = T::from_f64_lossy(w);
            }
        }
        Ok(Update { grad_norm, lr })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", RngState::new(1).normal("w", &[3, 2], 1.0)).unwrap();
        s.add("b", Tensor::zeros(&[2])).unwrap();
        s
    }

    fn set_grads(s: &mut ParamStore<f64>, scale: f64) {
        for id in s.ids().collect::<Vec<_>>() {
            let n = s.get(id).len();
            let g = s.get_mut(id).grad_mut();
            for (i, x) in g.iter_mut().enumerate().take(n) {
                *x = scale * (i as f64 - 1.5);
            }
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = OptimConfig {
            lr: 1.0,
            warmup_steps: 4,
            total_steps: 8,
            ..OptimConfig::default()
        };
        assert_eq!(c.lr_at(1), 0.25);
        assert_eq!(c.lr_at(4), 1.0);
        assert!(c.lr_at(5) < 1.0 && c.lr_at(5) > c.lr_at(6));
        assert!(c.lr_at(8) > 0.0);
        assert_eq!(c.lr_at(9), 0.0);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut s = store();
        let before = s.clone();
        let mut opt = OptimizerState::new(OptimConfig { lr: 0.0, ..OptimConfig::default() }, &s).unwrap();
        set_grads(&mut s, 1.0);
        opt.apply(&mut s).unwrap();
        for ((_, _, a), (_, _, b)) in s.iter().zip(before.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // with bias correction the first Adam step is lr * sign(g) (up to eps)
        let mut s = store();
        let before = s.clone();
        let cfg = OptimConfig {
            lr: 0.01,
            warmup_steps: 0,
            clip_norm: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &s).unwrap();
        set_grads(&mut s, 1.0);
        let lr = opt.apply(&mut s).unwrap().lr;
        let id = s.id("w").unwrap();
        for (i, (a, b)) in s.get(id).data().iter().zip(before.get(id).data()).enumerate() {
            let g = i as f64 - 1.5;
            assert!((b - a - lr * g.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn clipping_reports_pre_clip_norm() {
        let mut s = store();
        let mut opt = OptimizerState::new(OptimConfig::default(), &s).unwrap();
        set_grads(&mut s, 10.0);
        let expected = s.global_grad_norm();
        let u = opt.apply(&mut s).unwrap();
        assert_eq!(u.grad_norm, expected);
        assert!(u.grad_norm > 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = store();
        let mut opt = OptimizerState::new(OptimConfig::default(), &s).unwrap();
        set_grads(&mut s, f64::NAN);
        assert!(matches!(opt.apply(&mut s), Err(LunaError::NonFinite(_))));
    }
}
