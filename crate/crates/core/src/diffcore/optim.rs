//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    /// Plain Adam (no weight decay).
    pub fn adam(lr: f64) -> Self {
        Self {
            weight_decay: 0.0,
            ..Self::new(lr)
        }
    }
}

/// Optimizer state: step counter plus first and second moments per block.
#[derive(Clone, Debug)]
pub struct OptState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor2>,
    pub second_moment: Vec<Tensor2>,
}

impl OptState {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor2> = params
            .blocks()
            .iter()
            .map(|b| Tensor2::zeros(b.value.rows(), b.value.cols()))
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One AdamW update. Blocks without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter block `{}`",
                    params.name(id)
                )));
            }
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    detail: format!(
                        "gradient {:?} for block `{}` {:?}",
                        g.shape(),
                        params.name(id),
                        params.get(id).shape()
                    ),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.params() {
            let m = self.first_moment[id.0].data_mut();
            let v = self.second_moment[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.lr * c.weight_decay * p[i];
                p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Graph, Scope};

    fn grads_for(store: &ParamStore, grad: f64) -> Gradients {
        let mut g = Graph::new();
        let s = Scope::trainable(store);
        let p = s.w(&mut g, crate::diffcore::ParamId(0));
        let l = g.sum_all(p);
        let l = g.scale(l, grad);
        g.backward(l).unwrap()
    }

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor2::full(1, 3, v));
        s
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = store(0.7);
        let grads = grads_for(&p.clone(), 0.0);
        let mut cfg = AdamWConfig::adam(0.1);
        cfg.eps = 1e-8;
        let mut st = OptState::new(&p, cfg);
        st.step(&mut p, &grads).unwrap();
        assert_eq!(p.get(crate::diffcore::ParamId(0)).data(), &[0.7; 3]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        let mut p = store(1.0);
        let grads = grads_for(&p.clone(), 1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.0,
            weight_decay: 0.0,
        };
        let mut st = OptState::new(&p, cfg);
        st.step(&mut p, &grads).unwrap();
        for x in p.get(crate::diffcore::ParamId(0)).data() {
            assert!((x - 0.9).abs() < 1e-15);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_params() {
        let mut p = store(2.0);
        let grads = grads_for(&p.clone(), 0.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::new(0.1)
        };
        let mut st = OptState::new(&p, cfg);
        st.step(&mut p, &grads).unwrap();
        for x in p.get(crate::diffcore::ParamId(0)).data() {
            assert!((x - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_names_block() {
        let mut p = store(1.0);
        let grads = grads_for(&p.clone(), f64::NAN);
        let mut st = OptState::new(&p, AdamWConfig::new(0.1));
        let err = st.step(&mut p, &grads).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
    }
}
