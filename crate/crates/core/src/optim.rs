//! First-order optimizers over flat parameter buffers.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

/// Moment buffers, one per parameter buffer, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T> Default for OptimState<T> {
    fn default() -> Self {
        OptimState {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimConfig,
    pub state: OptimState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer {
            config,
            state: OptimState::default(),
        }
    }

    pub fn reset(&mut self) {
        self.state = OptimState::default();
    }

    /// Applies one update. `params[i]` and `grads[i]` must have equal length,
    /// and the buffer layout must not change between calls.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), grads.len(), "optimizer: params/grads count");
        let c = &self.config;
        let lr = T::lit(c.lr);
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &gi) in p.iter_mut().zip(g.iter()) {
                        *w = *w - lr * gi;
                    }
                }
                self.state.step += 1;
            }
            OptimizerKind::AdamW => {
                let st = &mut self.state;
                if st.m.is_empty() {
                    st.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
                    st.v = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
                }
                st.step += 1;
                let t = st.step as f64;
                let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                let bc1 = T::lit(1.0 - libm::pow(c.beta1, t));
                let bc2 = T::lit(1.0 - libm::pow(c.beta2, t));
                let eps = T::lit(c.eps);
                let decay = lr * T::lit(c.weight_decay);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut st.m[i], &mut st.v[i]);
                    assert_eq!(m.len(), p.len(), "optimizer: buffer layout changed");
                    for j in 0..p.len() {
                        let gj = g[j];
                        m[j] = b1 * m[j] + (T::one() - b1) * gj;
                        v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] = p[j] - decay * p[j] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
