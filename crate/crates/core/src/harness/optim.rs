use qica_autograd::{Mat, Real};
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept in `f64` regardless
/// of the parameter precision.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let sizes = params.entries().iter().map(|e| e.value.len());
        Self {
            config,
            step: 0,
            m: sizes.clone().map(|n| vec![0.0; n]).collect(),
            v: sizes.map(|n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` holds one entry per parameter that
    /// received a gradient; untouched parameters only decay if trainable.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[(ParamId, Mat<T>)]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut seen = vec![false; params.len()];
        for (id, g) in grads {
            if !params.is_trainable(*id) {
                continue;
            }
            seen[id.0] = true;
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let theta = params.value_mut(*id).data_mut();
            for (i, gi) in g.data().iter().enumerate() {
                let gi = gi.as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let th = theta[i].as_f64();
                theta[i] = T::of(th - c.learning_rate * (update + c.weight_decay * th));
            }
        }
        // parameters absent from this step still carry moments
        for idx in (0..params.len()).filter(|&i| !seen[i]) {
            let id = ParamId(idx);
            if !params.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let theta = params.value_mut(id).data_mut();
            for i in 0..m.len() {
                m[i] *= c.beta1;
                v[i] *= c.beta2;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let th = theta[i].as_f64();
                theta[i] = T::of(th - c.learning_rate * (update + c.weight_decay * th));
            }
        }
    }
}
