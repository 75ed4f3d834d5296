use rand_distr::{Distribution, Normal};

use super::param::{join, StateKind};
use super::{Mode, Module, Param, Rng};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fully connected layer, `y = x·Wᵀ + b` with `W` laid out `[out, in]`.
/// Any trailing input dimensions are flattened.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain * (1.0 / in_features as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let w = (0..in_features * out_features)
            .map(|_| T::lit(dist.sample(rng)))
            .collect();
        Linear {
            weight: Param::new(&[out_features, in_features], w),
            bias: Param::zeros(&[out_features]),
            in_features,
            out_features,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.sample_len(), self.in_features, "linear input width");
        let mut y = Tensor::zeros(&[n, self.out_features]);
        for row in y.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        T::gemm(
            n,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            (self.in_features as isize, 1),
            &self.weight.value,
            (1, self.in_features as isize),
            T::one(),
            y.data_mut(),
            (self.out_features as isize, 1),
        );
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.infer(x);
        if mode.records() {
            self.cache = Some(x.clone());
        }
        y
    }

    /// Returns the input gradient shaped like the recorded input.
    pub fn backward(&mut self, dy: &Tensor<T>, accumulate: bool) -> Tensor<T> {
        let x = self.cache.take().expect("linear backward without recorded forward");
        let n = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        if accumulate {
            T::gemm(
                fo,
                n,
                fi,
                T::one(),
                dy.data(),
                (1, fo as isize),
                x.data(),
                (fi as isize, 1),
                T::one(),
                &mut self.weight.grad,
                (fi as isize, 1),
            );
            for row in dy.data().chunks(fo) {
                for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            n,
            fo,
            fi,
            T::one(),
            dy.data(),
            (fo as isize, 1),
            &self.weight.value,
            (fi as isize, 1),
            T::zero(),
            dx.data_mut(),
            (fi as isize, 1),
        );
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &[usize], &[T])) {
        f(&join(prefix, "weight"), StateKind::Param, &self.weight.shape, &self.weight.value);
        f(&join(prefix, "bias"), StateKind::Param, &self.bias.shape, &self.bias.value);
    }

    fn visit_state_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, StateKind, &[usize], &mut [T]) -> Result<()>,
    ) -> Result<()> {
        f(&join(prefix, "weight"), StateKind::Param, &self.weight.shape, &mut self.weight.value)?;
        f(&join(prefix, "bias"), StateKind::Param, &self.bias.shape, &mut self.bias.value)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    #[test]
    fn forward_and_backward_by_hand() {
        let mut rng = seeded_rng(0);
        let mut l = Linear::<f64>::new(2, 3, 1.0, &mut rng);
        l.weight.value = vec![1., 2., 3., 4., 5., 6.];
        l.bias.value = vec![0.5, 0.0, -0.5];
        let x = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
        let y = l.forward(&x, Mode::Train);
        assert_eq!(y.data(), &[-0.5, -1.0, -1.5]);
        let dy = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 2.0]).unwrap();
        let dx = l.backward(&dy, true);
        assert_eq!(dx.data(), &[11.0, 14.0]);
        assert_eq!(l.weight.grad, vec![1., -1., 0., 0., 2., -2.]);
        assert_eq!(l.bias.grad, vec![1.0, 0.0, 2.0]);
    }
}
