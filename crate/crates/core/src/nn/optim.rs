use serde::{Deserialize, Serialize};

use super::{Module, Param};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over the parameters of one module; moments live on each [`Param`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig) -> Self {
        Adam { lr, config, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Forgets the step count and the moments stored on `module`'s parameters.
    pub fn reset<T: Scalar>(&mut self, module: &mut dyn Module<T>) {
        self.step = 0;
        module.visit_params_mut(&mut |p: &mut Param<T>| {
            p.m.clear();
            p.v.clear();
        });
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step<T: Scalar>(&mut self, module: &mut dyn Module<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(self.lr * bc2.sqrt() / bc1);
        let eps = T::lit(c.eps * bc2.sqrt());
        module.visit_params_mut(&mut |p: &mut Param<T>| {
            if p.m.is_empty() {
                p.m = vec![T::zero(); p.len()];
                p.v = vec![T::zero(); p.len()];
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (T::one() - b1) * g;
                p.v[i] = b2 * p.v[i] + (T::one() - b2) * g * g;
                p.value[i] -= step_size * p.m[i] / (p.v[i].sqrt() + eps);
            }
            p.zero_grad();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use crate::nn::param::StateKind;

    struct Quad {
        p: Param<f64>,
    }

    impl Module<f64> for Quad {
        fn visit_state(&self, _: &str, f: &mut dyn FnMut(&str, StateKind, &[usize], &[f64])) {
            f("p", StateKind::Param, &self.p.shape, &self.p.value);
        }
        fn visit_state_mut(
            &mut self,
            _: &str,
            f: &mut dyn FnMut(&str, StateKind, &[usize], &mut [f64]) -> Result<()>,
        ) -> Result<()> {
            f("p", StateKind::Param, &self.p.shape.clone(), &mut self.p.value)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.p);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut q = Quad {
            p: Param::new(&[2], vec![1.0, -1.0]),
        };
        q.p.grad = vec![0.5, -3.0];
        let mut opt = Adam::new(0.1, AdamConfig::default());
        opt.step(&mut q);
        assert!((q.p.value[0] - 0.9).abs() < 1e-6);
        assert!((q.p.value[1] + 0.9).abs() < 1e-6);
        assert_eq!(q.p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut q = Quad {
            p: Param::new(&[1], vec![3.0]),
        };
        let mut opt = Adam::new(0.05, AdamConfig::default());
        for _ in 0..2000 {
            q.p.grad[0] = 2.0 * (q.p.value[0] - 1.0);
            opt.step(&mut q);
        }
        assert!((q.p.value[0] - 1.0).abs() < 1e-3);
    }
}
