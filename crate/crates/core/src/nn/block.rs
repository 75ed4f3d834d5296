use super::{impl_module, BatchNorm, Conv2d, Mode, Relu, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Convolution, batch-norm, ReLU.
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    relu: Relu<T>,
}

impl_module!(ConvBnRelu { conv, bn });

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(cin, cout, kernel, stride, kernel / 2, 1.0, rng),
            bn: BatchNorm::new(cout),
            relu: Relu::new(),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        Relu::infer(&self.bn.infer(&self.conv.infer(x)))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.conv.forward(x, mode);
        let h = self.bn.forward(&h, mode);
        self.relu.forward(&h, mode)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, accumulate: bool, want_input_grad: bool) -> Option<Tensor<T>> {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d, accumulate);
        self.conv.backward(&d, accumulate, want_input_grad)
    }
}
