use serde::{Deserialize, Serialize};

use super::{Bound, Gradients, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter bound in `bound`. Parameters with no
    /// gradient (unused by the loss) still receive weight decay.
    pub fn step(&mut self, params: &mut ParamSet, bound: &Bound<'_>, grads: &Gradients) {
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let grad = grads.get(bound.get(id));
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                p[i] -= lr * weight_decay * p[i];
                let g = grad.map_or(0.0, |g| g.data()[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn quadratic_step(ps: &mut ParamSet, adam: &mut AdamState, scale: &Tensor) -> f64 {
        let g = Graph::new();
        let b = ps.bind(&g).unwrap();
        let w = b.get(ps.ids().next().unwrap());
        let c = g.constant(scale.clone()).unwrap();
        let loss = w.square().unwrap().mul(c).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        adam.step(ps, &b, &grads);
        loss.value().item()
    }

    #[test]
    fn zero_gradient_and_decay_leave_params() {
        let mut ps = ParamSet::new();
        let id = ps.insert("w", Tensor::new(&[2], vec![0.3, -0.7]).unwrap(), true);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &ps);
        let g = Graph::new();
        let b = ps.bind(&g).unwrap();
        let loss = b.get(id).scale(0.0).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        adam.step(&mut ps, &b, &grads);
        assert_eq!(ps.get(id).data(), &[0.3, -0.7]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn one_step_descends() {
        let mut ps = ParamSet::new();
        let id = ps.insert("w", Tensor::scalar(1.0), true);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &ps);
        quadratic_step(&mut ps, &mut adam, &Tensor::scalar(1.0));
        assert!(ps.get(id).item() < 1.0);
    }

    #[test]
    fn converges_on_two_d_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), true);
        let cfg = AdamConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &ps);
        let scale = Tensor::new(&[2], vec![1.0, 3.0]).unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            loss = quadratic_step(&mut ps, &mut adam, &scale);
        }
        assert!(loss < 1e-4, "loss {loss}");
    }
}
