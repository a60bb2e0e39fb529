use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive first/second moment estimates with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent.
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = kind {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::Config(format!(
                    "invalid moment hyperparameters beta1={beta1} beta2={beta2} eps={eps}"
                )));
            }
        }
        Ok(Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update using the gradients held in `params`. Tensors
    /// without a gradient slot are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.first.is_empty() {
            if let OptimizerKind::Adam { .. } = self.kind {
                for t in params.tensors_mut().iter() {
                    self.first.push(vec![T::zero(); t.numel()]);
                    self.second.push(vec![T::zero(); t.numel()]);
                }
            }
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.tensors_mut().iter())
                .any(|(m, t)| m.len() != t.numel())
        {
            return Err(dim_err!("optimizer state does not match parameter shapes"));
        }
        self.step += 1;
        let lr = T::lit(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for t in params.tensors_mut() {
                    let Some(g) = t.grad().map(<[T]>::to_vec) else {
                        continue;
                    };
                    for (w, gv) in t.data_mut().iter_mut().zip(g) {
                        *w = *w - lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                let c1 = T::lit(1.0 - beta1.powi(self.step as i32));
                let c2 = T::lit(1.0 - beta2.powi(self.step as i32));
                let eps = T::lit(eps);
                let one = T::one();
                for ((t, m), v) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let g = t.grad().map(<[T]>::to_vec);
                    let data = t.data_mut();
                    for i in 0..data.len() {
                        let gv = g.as_ref().map_or(T::zero(), |g| g[i]);
                        m[i] = b1 * m[i] + (one - b1) * gv;
                        v[i] = b2 * v[i] + (one - b2) * gv * gv;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
