//! Adaptive-moment optimizer with coupled L2 weight decay.

use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * theta` before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Tensor> = params
            .ids()
            .map(|id| Tensor::zeros(params.value(id).shape()))
            .collect();
        OptimizerState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One update from the accumulated gradients. Gradients are left in place.
pub fn adam_step(params: &mut ParameterSet, state: &mut OptimizerState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (values, grads) = params.values_and_grads_mut();
    for (k, (value, grad)) in values.iter_mut().zip(grads).enumerate() {
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (i, theta) in value.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i] + cfg.weight_decay * *theta;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *theta -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: Vec<f64>) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(values)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = one_param(vec![0.3, -2.0, 5.0]);
        let before = p.value(p.id("w").unwrap()).clone();
        let mut st = OptimizerState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..3 {
            adam_step(&mut p, &mut st, &cfg);
        }
        assert_eq!(p.value(p.id("w").unwrap()), &before);
        assert_eq!(st.step(), 3);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = one_param(vec![1.0, 1.0]);
        let id = p.id("w").unwrap();
        p.accumulate(id, &[0.25, -4.0]).unwrap();
        let mut st = OptimizerState::new(&p);
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut p, &mut st, &cfg);
        // mhat = g, vhat = g^2, so the update is lr * g / (|g| + eps)
        let w = p.value(id).data();
        let expect0 = 1.0 - 0.01 * 0.25 / (0.25 + 1e-8);
        let expect1 = 1.0 + 0.01 * 4.0 / (4.0 + 1e-8);
        assert!((w[0] - expect0).abs() < 1e-15);
        assert!((w[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn coupled_decay_shrinks_weights_without_gradient() {
        let mut p = one_param(vec![2.0]);
        let mut st = OptimizerState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adam_step(&mut p, &mut st, &cfg);
        assert!(p.value(p.id("w").unwrap()).data()[0] < 2.0);
    }

    #[test]
    fn defaults_match_training_protocol() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.weight_decay, 1e-6);
    }
}
