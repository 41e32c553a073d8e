//! Adaptive-moment optimizer with bias correction.

use super::params::{GradMap, ParamSet};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Adam { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient entry are left untouched
    /// (their moments still decay, matching the zero-gradient case).
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) {
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let (name, p) = params.at_mut(i);
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.shape().to_vec());
                    &zero
                }
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            let gd = g.data();
            for j in 0..pd.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * gd[j];
                v[j] = b2 * v[j] + (1.0 - b2) * gd[j] * gd[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut rng = Rng::new(1);
        let mut p = ParamSet::new();
        p.insert("w", Tensor::randn(vec![4, 4], 1.0, &mut rng));
        let before = p.get("w").clone();
        let mut opt = Adam::new(&p, AdamConfig::with_lr(0.1));
        let mut g = GradMap::new();
        g.insert("w", Tensor::zeros(vec![4, 4]));
        for _ in 0..5 {
            opt.step(&mut p, &g);
        }
        assert_eq!(before.data(), p.get("w").data());
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::new(vec![1], vec![3.0]));
        let mut opt = Adam::new(&p, AdamConfig::with_lr(0.05));
        for _ in 0..500 {
            let x = p.get("x").data()[0];
            let mut g = GradMap::new();
            g.insert("x", Tensor::new(vec![1], vec![2.0 * x]));
            opt.step(&mut p, &g);
        }
        assert!(p.get("x").data()[0].abs() < 0.05);
    }
}
