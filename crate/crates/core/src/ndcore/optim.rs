use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// AdamW with bias correction and decoupled weight decay.
///
/// Moments and step counts are kept per parameter: a task head only
/// advances when its task is sampled. Parameters that are frozen or
/// received no gradient are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Moments>,
    steps: u64,
    scratch: Vec<f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: Vec::new(),
            steps: 0,
            scratch: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update at learning rate `lr`.
    ///
    /// Every new value is computed before any is written; if one is
    /// non-finite the store and optimizer state are left as they were and
    /// a divergence error is returned.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), Moments::default);
        }
        self.steps += 1;

        // First pass: compute into scratch and validate.
        let mut layout = Vec::new();
        self.scratch.clear();
        for (id, g) in grads.iter() {
            let p = store.get(id);
            if !p.trainable {
                continue;
            }
            if g.len() != p.value.len() {
                return Err(Error::Dimension(format!(
                    "gradient for `{}` has {} values, parameter has {}",
                    p.name,
                    g.len(),
                    p.value.len()
                )));
            }
            let st = &self.state[id.index()];
            let n = g.len();
            let t = st.steps + 1;
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            let start = self.scratch.len();
            for i in 0..n {
                let (m0, v0) = if st.first.is_empty() {
                    (0.0, 0.0)
                } else {
                    (st.first[i], st.second[i])
                };
                let m = beta1 * m0 + (1.0 - beta1) * g[i];
                let v = beta2 * v0 + (1.0 - beta2) * g[i] * g[i];
                let w = p.value.data()[i];
                let decayed = w - lr * weight_decay * w;
                let new_w = decayed - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                if !new_w.is_finite() || !m.is_finite() || !v.is_finite() {
                    self.steps -= 1;
                    return Err(Error::Divergence {
                        param: p.name.clone(),
                        step: self.steps + 1,
                    });
                }
                self.scratch.extend_from_slice(&[new_w, m, v]);
            }
            layout.push((id, start, n));
        }

        for (id, start, n) in layout {
            let st = &mut self.state[id.index()];
            if st.first.is_empty() {
                st.first = vec![0.0; n];
                st.second = vec![0.0; n];
            }
            st.steps += 1;
            let vals = store.get_mut(id).value.data_mut();
            for i in 0..n {
                let s = &self.scratch[start + 3 * i..start + 3 * i + 3];
                vals[i] = s[0];
                st.first[i] = s[1];
                st.second[i] = s[2];
            }
        }
        Ok(())
    }
}
