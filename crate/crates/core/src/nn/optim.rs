use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
        AdamWState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, cfg: &AdamWConfig, params: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id);
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.data.len() {
                m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * g.data[j];
                v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * g.data[j] * g.data[j];
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= cfg.learning_rate
                    * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p.data[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let mut ps = ParamStore::new();
        ps.register("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = ps.clone();
        let mut st = AdamWState::new(&ps);
        let cfg = AdamWConfig { learning_rate: 0.0, ..AdamWConfig::default() };
        st.update(&cfg, &mut ps, &[Tensor::new(vec![3], vec![0.3, 0.1, -9.0]).unwrap()]);
        assert_eq!(ps, before);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.register("w", Tensor::new(vec![2], vec![3.0, -4.0]).unwrap());
        let mut st = AdamWState::new(&ps);
        let cfg = AdamWConfig { learning_rate: 0.05, weight_decay: 0.0, ..AdamWConfig::default() };
        for _ in 0..2000 {
            let g: Vec<f64> = ps.get(id).data.iter().map(|w| 2.0 * w).collect();
            st.update(&cfg, &mut ps, &[Tensor::new(vec![2], g).unwrap()]);
        }
        assert!(ps.get(id).data.iter().all(|w| w.abs() < 1e-2));
    }
}
