use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment gradient descent over every tensor in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the grad slots currently in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let values = store.value_mut(id).values_mut();
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                values[i] -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let x = store.value(p).values().to_vec();
            store.zero_grads();
            store.add_grad(p, &[2.0 * x[0], 2.0 * x[1]]);
            opt.step(&mut store);
        }
        assert!(store.value(p).values().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::vector(vec![1.5]));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        store.zero_grads();
        opt.step(&mut store);
        assert_eq!(store.value(p).values(), &[1.5]);
    }
}
