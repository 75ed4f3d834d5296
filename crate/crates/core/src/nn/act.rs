use super::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Default)]
pub struct Relu<T> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { out: None }
    }

    pub fn infer(x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| v.max(T::zero()))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = Self::infer(x);
        if mode.records() {
            self.out = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("relu backward without recorded forward");
        dy.zip_map(&y, |d, o| if o > T::zero() { d } else { T::zero() })
    }
}

#[derive(Default)]
pub struct Tanh<T> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Tanh<T> {
    pub fn new() -> Self {
        Tanh { out: None }
    }

    pub fn infer(x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| v.tanh())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = Self::infer(x);
        if mode.records() {
            self.out = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("tanh backward without recorded forward");
        dy.zip_map(&y, |d, o| d * (T::one() - o * o))
    }
}

/// Nearest-neighbour 2× upsampling of an NCHW tensor.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = Tensor::zeros(&[n, c, h2, w2]);
    let src = x.data();
    let dst = y.data_mut();
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * h2 * w2..(p + 1) * h2 * w2];
        for yy in 0..h2 {
            let srow = &s[(yy / 2) * w..(yy / 2 + 1) * w];
            let drow = &mut d[yy * w2..(yy + 1) * w2];
            for (xx, v) in drow.iter_mut().enumerate() {
                *v = srow[xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        let s = &src[p * h2 * w2..(p + 1) * h2 * w2];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for yy in 0..h2 {
            for xx in 0..w2 {
                d[(yy / 2) * w + xx / 2] += s[yy * w2 + xx];
            }
        }
    }
    dx
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    let dst = y.data_mut();
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let (a, b) = (2 * oy * w + 2 * ox, (2 * oy + 1) * w + 2 * ox);
                d[oy * wo + ox] = (s[a] + s[a + 1] + s[b] + s[b + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = upsample2(dy);
    dx.scale(T::lit(0.25));
    dx
}

/// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = T::from_usize(h * w).unwrap();
    let data = x.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / hw).collect();
    Tensor::from_vec(&[n, c], data).unwrap()
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c) = (dy.shape()[0], dy.shape()[1]);
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::from_vec(&[n, c, h, w], data).unwrap()
}
