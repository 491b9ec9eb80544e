//! Adam with decoupled weight decay.

use std::collections::HashMap;

use crate::param::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Moment estimates are keyed by parameter name, so the same optimizer can
/// step any subset of a model's parameters.
#[derive(Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, state: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Each entry pairs a parameter with its effective learning
    /// rate; a zero rate leaves the parameter bit-identical.
    pub fn step(&mut self, params: &mut [(&mut Param, f32)]) {
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (p, lr) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let lr = *lr;
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
            });
            if lr == 0.0 {
                continue;
            }
            let decay = 1.0 - lr * weight_decay;
            for (((w, g), m), v) in p.value.iter_mut().zip(&p.grad).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                *w *= decay;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_with_decay_shrinks_norm_every_step() {
        let mut p = Param::new("w", &[4], vec![1.0, -2.0, 0.5, 3.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() });
        let mut prev = p.sq_norm();
        for _ in 0..20 {
            opt.step(&mut [(&mut p, 1e-2)]);
            let now = p.sq_norm();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn zero_learning_rate_is_bit_exact_noop() {
        let mut p = Param::new("w", &[3], vec![0.1, 0.2, 0.3]);
        p.grad = vec![1.0, -1.0, 5.0];
        let before = p.value.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [(&mut p, 0.0)]);
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut p = Param::new("w", &[2], vec![0.0, 0.0]);
        p.grad = vec![3.0, -0.5];
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut [(&mut p, 1e-3)]);
        assert!((p.value[0] + 1e-3).abs() < 1e-8);
        assert!((p.value[1] - 1e-3).abs() < 1e-8);
    }
}
