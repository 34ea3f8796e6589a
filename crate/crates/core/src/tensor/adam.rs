use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Half-cosine from `lr_max` at step 0 down to `lr_min` at `total_steps`,
    /// flat afterwards.
    Cosine {
        lr_max: f64,
        lr_min: f64,
        total_steps: u64,
    },
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine {
                lr_max,
                lr_min,
                total_steps,
            } => {
                if total_steps == 0 {
                    return lr_min;
                }
                let t = step.min(total_steps) as f64 / total_steps as f64;
                let lr = lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos());
                lr.clamp(lr_min, lr_max)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl AdamConfig {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        self.config.schedule.lr(self.step)
    }

    /// One bias-corrected update. `grads[i]` of `None` leaves parameter `i`
    /// and its moments untouched. Any non-finite gradient aborts the whole
    /// step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.len() != store.get(id).len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        left: store.get(id).shape().to_vec(),
                        right: vec![g.len()],
                    });
                }
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(TensorError::NonFiniteGrad(store.name(id).to_string()));
                }
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = one_param(1.5);
        let mut st = AdamState::new(&s, AdamConfig::new(LrSchedule::Constant { lr: 0.1 }));
        st.step(&mut s, &[Some(vec![0.0])]).unwrap();
        assert_eq!(s.get(s.lookup("x").unwrap()).item(), 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one_param(0.0);
        let mut st = AdamState::new(&s, AdamConfig::new(LrSchedule::Constant { lr: 0.01 }));
        st.step(&mut s, &[Some(vec![1.0])]).unwrap();
        let x = s.get(s.lookup("x").unwrap()).item();
        assert!((x + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = one_param(0.0);
        let id = s.lookup("x").unwrap();
        let mut st = AdamState::new(&s, AdamConfig::new(LrSchedule::Constant { lr: 0.1 }));
        for _ in 0..500 {
            let x = s.get(id).item();
            st.step(&mut s, &[Some(vec![2.0 * (x - 3.0)])]).unwrap();
        }
        assert!((s.get(id).item() - 3.0).abs() < 0.01);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = one_param(0.0);
        let mut st = AdamState::new(&s, AdamConfig::new(LrSchedule::Constant { lr: 0.1 }));
        let err = st.step(&mut s, &[Some(vec![f64::NAN])]).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGrad("x".into()));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::Cosine {
            lr_max: 1e-4,
            lr_min: 1e-6,
            total_steps: 100,
        };
        assert_eq!(s.lr(0), 1e-4);
        assert!((s.lr(100) - 1e-6).abs() < 1e-18);
        assert!((s.lr(50) - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-15);
        assert_eq!(s.lr(1000), s.lr(100));
    }
}
