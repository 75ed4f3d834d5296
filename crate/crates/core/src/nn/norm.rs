use super::param::{join, StateKind};
use super::{Mode, Module, Param};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Per-channel batch normalization over `[N, C, ...]` (works for `[N, F]` too).
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    channels: usize,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(&[channels], vec![T::one(); channels]),
            beta: Param::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
            channels,
            cache: None,
        }
    }

    fn layout(&self, x: &Tensor<T>) -> (usize, usize) {
        let shape = x.shape();
        assert_eq!(shape[1], self.channels, "batch-norm channel count");
        let spatial: usize = shape[2..].iter().product();
        (shape[0], spatial)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, sp) = self.layout(x);
        let mut y = x.clone();
        let data = y.data_mut();
        for i in 0..n {
            for c in 0..self.channels {
                let inv = T::one() / (self.running_var[c] + self.eps).sqrt();
                let (g, b, m) = (self.gamma.value[c], self.beta.value[c], self.running_mean[c]);
                let off = (i * self.channels + c) * sp;
                for v in &mut data[off..off + sp] {
                    *v = g * (*v - m) * inv + b;
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode != Mode::Train {
            let y = self.infer(x);
            if mode.records() {
                let inv_std: Vec<T> = self
                    .running_var
                    .iter()
                    .map(|&v| T::one() / (v + self.eps).sqrt())
                    .collect();
                let (n, sp) = self.layout(x);
                let mut xhat = x.data().to_vec();
                for i in 0..n {
                    for c in 0..self.channels {
                        let off = (i * self.channels + c) * sp;
                        for v in &mut xhat[off..off + sp] {
                            *v = (*v - self.running_mean[c]) * inv_std[c];
                        }
                    }
                }
                self.cache = Some(BnCache {
                    xhat,
                    inv_std,
                    batch_stats: false,
                });
            }
            return y;
        }

        let (n, sp) = self.layout(x);
        let count = n * sp;
        let cnt = T::from_usize(count).unwrap();
        let src = x.data();
        let mut mean = vec![T::zero(); self.channels];
        let mut var = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let mut s = T::zero();
            for i in 0..n {
                let off = (i * self.channels + c) * sp;
                s += src[off..off + sp].iter().copied().sum::<T>();
            }
            mean[c] = s / cnt;
            let mut q = T::zero();
            for i in 0..n {
                let off = (i * self.channels + c) * sp;
                q += src[off..off + sp]
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<T>();
            }
            var[c] = q / cnt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let mut xhat = src.to_vec();
        let mut y = Tensor::zeros(x.shape());
        let out = y.data_mut();
        for i in 0..n {
            for c in 0..self.channels {
                let off = (i * self.channels + c) * sp;
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for (xh, o) in xhat[off..off + sp].iter_mut().zip(&mut out[off..off + sp]) {
                    *xh = (*xh - mean[c]) * inv_std[c];
                    *o = g * *xh + b;
                }
            }
        }
        let mom = self.momentum;
        let unbias = if count > 1 {
            cnt / (cnt - T::one())
        } else {
            T::one()
        };
        for c in 0..self.channels {
            self.running_mean[c] = (T::one() - mom) * self.running_mean[c] + mom * mean[c];
            self.running_var[c] = (T::one() - mom) * self.running_var[c] + mom * var[c] * unbias;
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            batch_stats: true,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, accumulate: bool) -> Tensor<T> {
        let cache = self.cache.take().expect("batch-norm backward without recorded forward");
        let (n, sp) = self.layout(dy);
        let g = dy.data();
        let mut dx = Tensor::zeros(dy.shape());
        let out = dx.data_mut();
        let cnt = T::from_usize(n * sp).unwrap();
        for c in 0..self.channels {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let off = (i * self.channels + c) * sp;
                for (d, xh) in g[off..off + sp].iter().zip(&cache.xhat[off..off + sp]) {
                    sum_dy += *d;
                    sum_dy_xhat += *d * *xh;
                }
            }
            if accumulate {
                self.gamma.grad[c] += sum_dy_xhat;
                self.beta.grad[c] += sum_dy;
            }
            let gamma = self.gamma.value[c];
            let inv = cache.inv_std[c];
            for i in 0..n {
                let off = (i * self.channels + c) * sp;
                for k in off..off + sp {
                    out[k] = if cache.batch_stats {
                        gamma * inv * (g[k] - sum_dy / cnt - cache.xhat[k] * sum_dy_xhat / cnt)
                    } else {
                        gamma * inv * g[k]
                    };
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &[usize], &[T])) {
        let shape = [self.channels];
        f(&join(prefix, "gamma"), StateKind::Param, &shape, &self.gamma.value);
        f(&join(prefix, "beta"), StateKind::Param, &shape, &self.beta.value);
        f(&join(prefix, "running_mean"), StateKind::Buffer, &shape, &self.running_mean);
        f(&join(prefix, "running_var"), StateKind::Buffer, &shape, &self.running_var);
    }

    fn visit_state_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, StateKind, &[usize], &mut [T]) -> Result<()>,
    ) -> Result<()> {
        let shape = [self.channels];
        f(&join(prefix, "gamma"), StateKind::Param, &shape, &mut self.gamma.value)?;
        f(&join(prefix, "beta"), StateKind::Param, &shape, &mut self.beta.value)?;
        f(&join(prefix, "running_mean"), StateKind::Buffer, &shape, &mut self.running_mean)?;
        f(&join(prefix, "running_var"), StateKind::Buffer, &shape, &mut self.running_var)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
