use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::param::{join, StateKind};
use super::{Mode, Module, Param, Rng};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output-column range for kernel offset `kx` (stride 1 only).
    fn span(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }
}

fn im2col<T: Scalar>(x: &[T], g: Geometry, cols: &mut [T]) {
    let hwo = g.cols();
    let zero = T::zero();
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * hwo;
                let dst = &mut cols[row..row + hwo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(zero);
                        continue;
                    }
                    let xrow = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.span(kx);
                        drow[..lo].fill(zero);
                        drow[hi..].fill(zero);
                        if hi > lo {
                            let off = lo + kx - g.pad;
                            drow[lo..hi].copy_from_slice(&xrow[off..off + hi - lo]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.w as isize {
                                xrow[ix as usize]
                            } else {
                                zero
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image.
fn col2im<T: Scalar>(cols: &[T], g: Geometry, x: &mut [T]) {
    let hwo = g.cols();
    for ci in 0..g.c {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * hwo;
                let src = &cols[row..row + hwo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    let xrow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.span(kx);
                        if hi > lo {
                            let off = lo + kx - g.pad;
                            for (d, &s) in xrow[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                xrow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn normal_init<T: Scalar>(n: usize, std: f64, rng: &mut Rng) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
}

fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// 2-D convolution, weights laid out `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialisation scaled by `gain`.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let n = out_channels * in_channels * kernel * kernel;
        Conv2d {
            weight: Param::new(
                &[out_channels, in_channels, kernel, kernel],
                normal_init(n, std, rng),
            ),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn geometry(&self, x: &Tensor<T>) -> Geometry {
        let (_, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "conv input channels");
        let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        Geometry {
            c,
            h,
            w,
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
            ho,
            wo,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let n = x.batch();
        let (rows, hwo) = (g.rows(), g.cols());
        let cout = self.out_channels;
        let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
        let pointwise = self.is_pointwise();
        out.data_mut()
            .par_chunks_mut(cout * hwo)
            .enumerate()
            .for_each(|(i, o)| {
                let xs = x.sample(i);
                let mut buf = Vec::new();
                let cols: &[T] = if pointwise {
                    xs
                } else {
                    buf.resize(rows * hwo, T::zero());
                    im2col(xs, g, &mut buf);
                    &buf
                };
                for (co, chunk) in o.chunks_mut(hwo).enumerate() {
                    chunk.fill(self.bias.value[co]);
                }
                T::gemm(
                    cout,
                    rows,
                    hwo,
                    T::one(),
                    &self.weight.value,
                    (rows as isize, 1),
                    cols,
                    (hwo as isize, 1),
                    T::one(),
                    o,
                    (hwo as isize, 1),
                );
            });
        out
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.infer(x);
        if mode.records() {
            self.cache = Some(x.clone());
        }
        y
    }

    /// Accumulates parameter gradients when `accumulate`; returns the input
    /// gradient when `want_input_grad`.
    pub fn backward(
        &mut self,
        dy: &Tensor<T>,
        accumulate: bool,
        want_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let x = self.cache.take().expect("conv backward without recorded forward");
        let g = self.geometry(&x);
        let n = x.batch();
        let (rows, hwo) = (g.rows(), g.cols());
        let cout = self.out_channels;
        let pointwise = self.is_pointwise();
        let weight = &self.weight.value;

        let mut dx = if want_input_grad {
            Some(Tensor::zeros(x.shape()))
        } else {
            None
        };
        let per_in = x.sample_len();
        let mut dx_chunks: Vec<Option<&mut [T]>> = match dx.as_mut() {
            Some(t) => t.data_mut().chunks_mut(per_in).map(Some).collect(),
            None => (0..n).map(|_| None).collect(),
        };

        let partials: Vec<Option<(Vec<T>, Vec<T>)>> = dx_chunks
            .par_iter_mut()
            .enumerate()
            .map(|(i, dxi)| {
                let dyi = dy.sample(i);
                let xs = x.sample(i);
                let mut buf = Vec::new();
                let grads = if accumulate {
                    let cols: &[T] = if pointwise {
                        xs
                    } else {
                        buf.resize(rows * hwo, T::zero());
                        im2col(xs, g, &mut buf);
                        &buf
                    };
                    let mut dw = vec![T::zero(); cout * rows];
                    T::gemm(
                        cout,
                        hwo,
                        rows,
                        T::one(),
                        dyi,
                        (hwo as isize, 1),
                        cols,
                        (1, hwo as isize),
                        T::zero(),
                        &mut dw,
                        (rows as isize, 1),
                    );
                    let db: Vec<T> = dyi.chunks(hwo).map(|c| c.iter().copied().sum()).collect();
                    Some((dw, db))
                } else {
                    None
                };
                if let Some(dxi) = dxi.as_deref_mut() {
                    if pointwise {
                        T::gemm(
                            rows,
                            cout,
                            hwo,
                            T::one(),
                            weight,
                            (1, rows as isize),
                            dyi,
                            (hwo as isize, 1),
                            T::zero(),
                            dxi,
                            (hwo as isize, 1),
                        );
                    } else {
                        let mut dcols = buf;
                        dcols.resize(rows * hwo, T::zero());
                        T::gemm(
                            rows,
                            cout,
                            hwo,
                            T::one(),
                            weight,
                            (1, rows as isize),
                            dyi,
                            (hwo as isize, 1),
                            T::zero(),
                            &mut dcols,
                            (hwo as isize, 1),
                        );
                        col2im(&dcols, g, dxi);
                    }
                }
                grads
            })
            .collect();

        if accumulate {
            let (dws, dbs): (Vec<_>, Vec<_>) = partials.into_iter().flatten().unzip();
            let dw = sum_in_order(dws, cout * rows);
            let db = sum_in_order(dbs, cout);
            for (a, v) in self.weight.grad.iter_mut().zip(dw) {
                *a += v;
            }
            for (a, v) in self.bias.grad.iter_mut().zip(db) {
                *a += v;
            }
        }
        drop(dx_chunks);
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
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

/// Transposed convolution ("deconvolution"), weights laid out `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(output_pad < stride, "output padding must be smaller than stride");
        // each output pixel sees roughly in*k*k/stride^2 inputs
        let fan_in = (in_channels * kernel * kernel) as f64 / (stride * stride) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let n = in_channels * out_channels * kernel * kernel;
        ConvTranspose2d {
            weight: Param::new(
                &[in_channels, out_channels, kernel, kernel],
                normal_init(n, std, rng),
            ),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            output_pad,
            cache: None,
        }
    }

    /// Geometry of the adjoint convolution mapping the output back onto the input grid.
    fn geometry(&self, x: &Tensor<T>) -> Geometry {
        let (_, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "deconv input channels");
        let ho = (h - 1) * self.stride + self.kernel + self.output_pad - 2 * self.pad;
        let wo = (w - 1) * self.stride + self.kernel + self.output_pad - 2 * self.pad;
        Geometry {
            c: self.out_channels,
            h: ho,
            w: wo,
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
            ho: h,
            wo: w,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let n = x.batch();
        let (rows, hw) = (g.rows(), g.cols());
        let cin = self.in_channels;
        let cout = self.out_channels;
        let mut out = Tensor::zeros(&[n, cout, g.h, g.w]);
        let plane = g.h * g.w;
        out.data_mut()
            .par_chunks_mut(cout * plane)
            .enumerate()
            .for_each(|(i, o)| {
                let mut cols = vec![T::zero(); rows * hw];
                T::gemm(
                    rows,
                    cin,
                    hw,
                    T::one(),
                    &self.weight.value,
                    (1, rows as isize),
                    x.sample(i),
                    (hw as isize, 1),
                    T::zero(),
                    &mut cols,
                    (hw as isize, 1),
                );
                for (co, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.fill(self.bias.value[co]);
                }
                col2im(&cols, g, o);
            });
        out
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.infer(x);
        if mode.records() {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(
        &mut self,
        dy: &Tensor<T>,
        accumulate: bool,
        want_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let x = self.cache.take().expect("deconv backward without recorded forward");
        let g = self.geometry(&x);
        let n = x.batch();
        let (rows, hw) = (g.rows(), g.cols());
        let cin = self.in_channels;
        let cout = self.out_channels;
        let plane = g.h * g.w;
        let weight = &self.weight.value;

        let mut dx = want_input_grad.then(|| Tensor::zeros(x.shape()));
        let per_in = x.sample_len();
        let mut dx_chunks: Vec<Option<&mut [T]>> = match dx.as_mut() {
            Some(t) => t.data_mut().chunks_mut(per_in).map(Some).collect(),
            None => (0..n).map(|_| None).collect(),
        };

        let partials: Vec<Option<(Vec<T>, Vec<T>)>> = dx_chunks
            .par_iter_mut()
            .enumerate()
            .map(|(i, dxi)| {
                let dyi = dy.sample(i);
                let mut dcols = vec![T::zero(); rows * hw];
                im2col(dyi, g, &mut dcols);
                if let Some(dxi) = dxi.as_deref_mut() {
                    T::gemm(
                        cin,
                        rows,
                        hw,
                        T::one(),
                        weight,
                        (rows as isize, 1),
                        &dcols,
                        (hw as isize, 1),
                        T::zero(),
                        dxi,
                        (hw as isize, 1),
                    );
                }
                accumulate.then(|| {
                    let mut dw = vec![T::zero(); cin * rows];
                    T::gemm(
                        cin,
                        hw,
                        rows,
                        T::one(),
                        x.sample(i),
                        (hw as isize, 1),
                        &dcols,
                        (1, hw as isize),
                        T::zero(),
                        &mut dw,
                        (rows as isize, 1),
                    );
                    let db: Vec<T> = dyi
                        .chunks(plane)
                        .map(|c| c.iter().copied().sum())
                        .collect();
                    (dw, db)
                })
            })
            .collect();

        if accumulate {
            let (dws, dbs): (Vec<_>, Vec<_>) = partials.into_iter().flatten().unzip();
            let dw = sum_in_order(dws, cin * rows);
            let db = sum_in_order(dbs, cout);
            for (a, v) in self.weight.grad.iter_mut().zip(dw) {
                *a += v;
            }
            for (a, v) in self.bias.grad.iter_mut().zip(db) {
                *a += v;
            }
        }
        drop(dx_chunks);
        dx
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
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

    /// Direct nested-loop convolution.
    fn conv_oracle(x: &Tensor<f64>, c: &Conv2d<f64>) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4();
        let k = c.kernel;
        let ho = (h + 2 * c.pad - k) / c.stride + 1;
        let wo = (w + 2 * c.pad - k) / c.stride + 1;
        let mut out = Tensor::zeros(&[n, c.out_channels, ho, wo]);
        for b in 0..n {
            for co in 0..c.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = c.bias.value[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                    let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += c.weight.value[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data()[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * c.out_channels + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = seeded_rng(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, normal_init(n, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = seeded_rng(1);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (7, 1, 3)] {
            let mut c = Conv2d::<f64>::new(2, 3, k, s, p, 1.0, &mut rng);
            c.bias.value = vec![0.1, -0.2, 0.3];
            let x = random(&[2, 2, 6, 6], 9);
            let got = c.infer(&x);
            let want = conv_oracle(&x, &c);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x)> linear part equals <dx, x> and <dW, W>
        let mut rng = seeded_rng(2);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let mut c = Conv2d::<f64>::new(3, 2, k, s, p, 1.0, &mut rng);
            let x = random(&[2, 3, 8, 8], 3);
            let y = c.forward(&x, Mode::Train);
            let dy = random(y.shape(), 4);
            let dx = c.backward(&dy, true, true).unwrap();
            let lhs: f64 = dy.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let bias_part: f64 = c.bias.grad.iter().zip(&c.bias.value).map(|(a, b)| a * b).sum();
            let via_x: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = c.weight.grad.iter().zip(&c.weight.value).map(|(a, b)| a * b).sum();
            assert!((lhs - bias_part - via_x).abs() < 1e-9);
            assert!((lhs - bias_part - via_w).abs() < 1e-9);
        }
    }

    #[test]
    fn deconv_doubles_resolution_and_is_adjoint() {
        let mut rng = seeded_rng(3);
        let mut d = ConvTranspose2d::<f64>::new(3, 2, 3, 2, 1, 1, 1.0, &mut rng);
        let x = random(&[2, 3, 4, 4], 5);
        let y = d.forward(&x, Mode::Train);
        assert_eq!(y.shape(), &[2, 2, 8, 8]);
        let dy = random(y.shape(), 6);
        let dx = d.backward(&dy, true, true).unwrap();
        let lhs: f64 = dy.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = d.weight.grad.iter().zip(&d.weight.value).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-9);
        assert!((lhs - via_w).abs() < 1e-9);
    }

    #[test]
    fn deconv_is_transpose_of_strided_conv() {
        // deconv(x) with shared weights equals the adjoint of conv(stride 2)
        let mut rng = seeded_rng(4);
        let d = ConvTranspose2d::<f64>::new(2, 3, 3, 2, 1, 1, 1.0, &mut rng);
        let mut c = Conv2d::<f64>::new(3, 2, 3, 2, 1, 1.0, &mut rng);
        // conv weight [out=2, in=3] is deconv weight [in=2, out=3]
        c.weight.value = d.weight.value.clone();
        let x = random(&[1, 2, 4, 4], 7);
        let z = random(&[1, 3, 8, 8], 8);
        let dz = d.infer(&x);
        let cz = c.infer(&z);
        let a: f64 = dz.data().iter().zip(z.data()).map(|(p, q)| p * q).sum();
        let b: f64 = cz.data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() < 1e-9);
    }
}
