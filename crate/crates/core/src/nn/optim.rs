//! Adam optimizer over a [`ParamSet`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{GradStore, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty folded into the gradient (classic Adam style).
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with per-parameter step counts; parameters that received no gradient
/// in a step keep their moments untouched.
#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let m = params.ids().map(|id| Array2::zeros(params.get(id).dim())).collect();
        let v = params.ids().map(|id| Array2::zeros(params.get(id).dim())).collect();
        Self {
            config,
            m,
            v,
            steps: vec![0; params.len()],
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradStore) {
        let c = self.config;
        for id in params.ids() {
            let Some(grad) = grads.get(id) else { continue };
            let ix = id.index();
            self.steps[ix] += 1;
            let t = self.steps[ix] as i32;
            let p = params.get_mut(id);
            let m = &mut self.m[ix];
            let v = &mut self.v[ix];
            ndarray::Zip::from(p)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &graw, m, v| {
                    let g = graw + c.weight_decay * *p;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / (1.0 - c.beta1.powi(t));
                    let vhat = *v / (1.0 - c.beta2.powi(t));
                    *p -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
                });
        }
    }
}
