//! Optimizers operating on [`ParamSet`]s.

use serde::{Deserialize, Serialize};

use crate::tensor::ParamSet;

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ParamSet>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(velocity.tensors_mut())
        {
            for ((p, g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let g = g + self.weight_decay * *p;
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Option<ParamSet>,
    v: Option<ParamSet>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: None,
            v: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let c = self.config;
        let m = self.m.get_or_insert_with(|| params.zeros_like());
        let v = self.v.get_or_insert_with(|| params.zeros_like());
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(m.tensors_mut())
            .zip(v.tensors_mut())
        {
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn sgd_momentum_trace() {
        let mut p = scalar(1.0);
        let g = scalar(0.5);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step(&mut p, &g);
        assert!((p.get("w").data()[0] - 0.95).abs() < 1e-15);
        opt.step(&mut p, &g);
        // v = 0.9*0.5 + 0.5 = 0.95
        assert!((p.get("w").data()[0] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = scalar(2.0);
        let g = scalar(0.0);
        let mut sgd = Sgd::new(0.1, 0.9, 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            sgd.step(&mut p, &g);
            adam.step(&mut p, &g);
        }
        assert_eq!(p.get("w").data()[0], 2.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &scalar(3.0));
        assert!((p.get("w").data()[0] + 1e-3).abs() < 1e-9);
    }
}
