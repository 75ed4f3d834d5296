//! The layer (foreground/midground) generators and the panorama generator.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, write_archive};
use crate::domain::{Component, FaceImage, FacialTemplate};
use crate::error::{Error, Result};
use crate::losses::Stage;
use crate::nn::{
    impl_module, seeded_rng, upsample2, upsample2_backward, Adam, BatchNorm, Conv2d, ConvBnRelu, ConvTranspose2d,
    Linear, Mode, Module, Relu, Rng, StateDict, Tanh,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel schedule of a foreground/midground generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSchedule {
    /// Channels of the 4×4 map produced by the template mapper.
    pub c0: usize,
    /// Output channels of the upsampling blocks; the last `log2(H/4) - 1` are used.
    pub blocks: Vec<usize>,
}

/// Channel schedule of the panorama generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanoSchedule {
    /// Encoder block outputs; the last `log2(H/4)` are used.
    pub encoder: Vec<usize>,
    /// Channels of the injected template map.
    pub template_channels: usize,
    pub fusion: usize,
    /// PanoBlock outputs; the last `log2(H/4)` are used.
    pub decoder: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorArch {
    pub d: usize,
    pub resolution: usize,
    pub layer: LayerSchedule,
    pub panorama: PanoSchedule,
    /// Init gain of the multi-scale output convolutions.
    pub out_gain: f64,
}

impl GeneratorArch {
    /// Full-width schedule for 128×128 outputs.
    pub fn reference(d: usize, resolution: usize) -> Self {
        GeneratorArch {
            d,
            resolution,
            layer: LayerSchedule {
                c0: 256,
                blocks: vec![128, 64, 32, 16],
            },
            panorama: PanoSchedule {
                encoder: vec![64, 128, 256, 512, 512],
                template_channels: 64,
                fusion: 512,
                decoder: vec![256, 128, 64, 32, 16],
            },
            out_gain: 0.5,
        }
    }

    /// Reduced widths sized for CPU-only experiments.
    pub fn toy(d: usize, resolution: usize) -> Self {
        GeneratorArch {
            d,
            resolution,
            layer: LayerSchedule {
                c0: 64,
                blocks: vec![32, 16, 16, 8],
            },
            panorama: PanoSchedule {
                encoder: vec![16, 32, 64, 128, 256],
                template_channels: 16,
                fusion: 256,
                decoder: vec![64, 32, 16, 16, 8],
            },
            out_gain: 0.5,
        }
    }

    /// Number of resolution doublings between 4×4 and the output.
    pub fn doublings(&self) -> Result<usize> {
        let r = self.resolution;
        if r < 32 || !r.is_power_of_two() {
            return Err(Error::Dimension(format!("resolution {r} is not a power of two >= 32")));
        }
        Ok(r.trailing_zeros() as usize - 2)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.doublings()?;
        if self.d < crate::extractor::MIN_TEMPLATE_DIM {
            return Err(Error::Dimension(format!("template dimension {} is too small", self.d)));
        }
        let short = |name: &str, have: usize, need: usize| {
            Error::Dimension(format!("{name} schedule has {have} entries, resolution needs {need}"))
        };
        if self.layer.blocks.len() < n - 1 {
            return Err(short("layer block", self.layer.blocks.len(), n - 1));
        }
        if self.panorama.encoder.len() < n {
            return Err(short("encoder", self.panorama.encoder.len(), n));
        }
        if self.panorama.decoder.len() < n {
            return Err(short("decoder", self.panorama.decoder.len(), n));
        }
        let all = [self.layer.c0, self.panorama.template_channels, self.panorama.fusion];
        if all
            .iter()
            .chain(&self.layer.blocks)
            .chain(&self.panorama.encoder)
            .chain(&self.panorama.decoder)
            .any(|&c| c == 0)
        {
            return Err(Error::Dimension("channel counts must be positive".into()));
        }
        Ok(())
    }
}

fn tail(v: &[usize], n: usize) -> &[usize] {
    &v[v.len() - n..]
}

fn check_templates<T: Scalar>(t: &Tensor<T>, d: usize) -> Result<()> {
    let s = t.shape();
    if s.len() != 2 || s[1] != d {
        return Err(Error::Dimension(format!("expected templates [N, {d}], got {s:?}")));
    }
    Ok(())
}

/// Frozen networks never mutate: a training forward becomes a traced one.
fn effective(mode: Mode, trainable: bool) -> Mode {
    if mode == Mode::Train && !trainable {
        Mode::Trace
    } else {
        mode
    }
}

/// Template → `[N, C, 4, 4]` via linear, batch-norm, ReLU.
pub struct TemplateMapper<T> {
    linear: Linear<T>,
    bn: BatchNorm<T>,
    relu: Relu<T>,
    channels: usize,
}

impl_module!(TemplateMapper { linear, bn });

impl<T: Scalar> TemplateMapper<T> {
    pub fn new(d: usize, channels: usize, rng: &mut Rng) -> Self {
        TemplateMapper {
            linear: Linear::new(d, channels * 16, 1.0, rng),
            bn: BatchNorm::new(channels),
            relu: Relu::new(),
            channels,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.linear.in_features
    }

    pub fn infer(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        check_templates(t, self.input_dim())?;
        let h = self.linear.infer(t).reshape(&[t.batch(), self.channels, 4, 4])?;
        Ok(Relu::infer(&self.bn.infer(&h)))
    }

    pub fn forward(&mut self, t: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_templates(t, self.input_dim())?;
        let h = self.linear.forward(t, mode).reshape(&[t.batch(), self.channels, 4, 4])?;
        let h = self.bn.forward(&h, mode);
        Ok(self.relu.forward(&h, mode))
    }

    pub fn backward(&mut self, dy: &Tensor<T>, accumulate: bool) -> Tensor<T> {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d, accumulate);
        let n = d.batch();
        let d = d.reshape(&[n, self.channels * 16]).expect("mapper gradient shape");
        self.linear.backward(&d, accumulate)
    }
}

/// Nearest-neighbour 2× upsample then conv-BN-ReLU (ForeBlock / MidBlock).
pub struct UpBlock<T> {
    body: ConvBnRelu<T>,
}

impl_module!(UpBlock { body });

impl<T: Scalar> UpBlock<T> {
    fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        UpBlock {
            body: ConvBnRelu::new(cin, cout, 3, 1, rng),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.body.infer(&upsample2(x))
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        self.body.forward(&upsample2(x), mode)
    }

    fn backward(&mut self, dy: &Tensor<T>, accumulate: bool) -> Tensor<T> {
        let d = self.body.backward(dy, accumulate, true).expect("input gradient requested");
        upsample2_backward(&d)
    }
}

/// 2× upsample, 3×3 conv to RGB, tanh (ForeBlock-out / MidBlock-out).
pub struct UpOut<T> {
    conv: Conv2d<T>,
    tanh: Tanh<T>,
}

impl_module!(UpOut { conv });

impl<T: Scalar> UpOut<T> {
    fn new(cin: usize, gain: f64, rng: &mut Rng) -> Self {
        UpOut {
            conv: Conv2d::new(cin, 3, 3, 1, 1, gain, rng),
            tanh: Tanh::new(),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        Tanh::infer(&self.conv.infer(&upsample2(x)))
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.conv.forward(&upsample2(x), mode);
        self.tanh.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>, accumulate: bool) -> Tensor<T> {
        let d = self.tanh.backward(dy);
        let d = self.conv.backward(&d, accumulate, true).expect("input gradient requested");
        upsample2_backward(&d)
    }
}

/// Template → one masked facial layer. Foreground and midground generators
/// share this architecture and differ only in their component.
pub struct LayerGenerator<T> {
    pub component: Component,
    mapper: TemplateMapper<T>,
    blocks: Vec<UpBlock<T>>,
    out: UpOut<T>,
    trainable: bool,
}

impl_module!(LayerGenerator { mapper, out } [blocks]);

impl<T: Scalar> LayerGenerator<T> {
    pub fn new(component: Component, arch: &GeneratorArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let n = arch.doublings()?;
        let mapper = TemplateMapper::new(arch.d, arch.layer.c0, rng);
        let mut cin = arch.layer.c0;
        let mut blocks = Vec::new();
        for &c in tail(&arch.layer.blocks, n - 1) {
            blocks.push(UpBlock::new(cin, c, rng));
            cin = c;
        }
        Ok(LayerGenerator {
            component,
            mapper,
            blocks,
            out: UpOut::new(cin, arch.out_gain, rng),
            trainable: true,
        })
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.trainable = flag;
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn input_dim(&self) -> usize {
        self.mapper.input_dim()
    }

    /// `[N, d] -> [N, 3, H, W]` with running statistics.
    pub fn infer(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.mapper.infer(t)?;
        for b in &self.blocks {
            h = b.infer(&h);
        }
        Ok(self.out.infer(&h))
    }

    /// Spatial size after the mapper and after each block, for inspection.
    pub fn trajectory(&self, t: &Tensor<T>) -> Result<Vec<usize>> {
        let mut h = self.mapper.infer(t)?;
        let mut sizes = vec![h.shape()[2]];
        for b in &self.blocks {
            h = b.infer(&h);
            sizes.push(h.shape()[2]);
        }
        sizes.push(self.out.infer(&h).shape()[2]);
        Ok(sizes)
    }

    pub fn forward(&mut self, t: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mode = effective(mode, self.trainable);
        let mut h = self.mapper.forward(t, mode)?;
        for b in &mut self.blocks {
            h = b.forward(&h, mode);
        }
        Ok(self.out.forward(&h, mode))
    }

    /// Accumulates parameter gradients (when trainable) and returns the template gradient.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let acc = self.trainable;
        let mut d = self.out.backward(dy, acc);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d, acc);
        }
        self.mapper.backward(&d, acc)
    }

    /// One optimizer step; a frozen generator is left untouched.
    pub fn apply_update(&mut self, opt: &mut Adam) {
        if self.trainable {
            opt.step(self);
        }
    }

    pub fn generate(&self, t: &FacialTemplate<T>) -> Result<FaceImage<T>> {
        let y = self.infer(&Tensor::from_vec(&[1, t.dim()], t.values().to_vec())?)?;
        FaceImage::from_batch(&y, 0)
    }
}

/// Generates one layer image from a template with inference statistics.
pub fn generate_layer<T: Scalar>(gen: &LayerGenerator<T>, t: &FacialTemplate<T>) -> Result<FaceImage<T>> {
    gen.generate(t)
}

/// Conv then batch-norm, no activation.
struct ConvBn<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

impl_module!(ConvBn { conv, bn });

impl<T: Scalar> ConvBn<T> {
    fn new(c: usize, rng: &mut Rng) -> Self {
        ConvBn {
            conv: Conv2d::new(c, c, 3, 1, 1, 1.0, rng),
            bn: BatchNorm::new(c),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.bn.infer(&self.conv.infer(x))
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.conv.forward(x, mode);
        self.bn.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>, accumulate: bool) -> Tensor<T> {
        let d = self.bn.backward(dy, accumulate);
        self.conv.backward(&d, accumulate, true).expect("input gradient requested")
    }
}

/// Stride-2 deconvolution followed by two residual conv pairs:
///
/// ```text
/// d  = BN(deconv(x))
/// p1 = relu(BN2(conv2(relu(BN1(conv1(d))))) + d)
/// p2 = relu(BN4(conv4(relu(BN3(conv3(p1))))) + p1 + d)
/// ```
pub struct PanoBlock<T> {
    deconv: ConvTranspose2d<T>,
    dn: BatchNorm<T>,
    a: ConvBnRelu<T>,
    b: ConvBn<T>,
    c: ConvBnRelu<T>,
    e: ConvBn<T>,
    relu1: Relu<T>,
    relu2: Relu<T>,
}

impl_module!(PanoBlock { deconv, dn, a, b, c, e });

impl<T: Scalar> PanoBlock<T> {
    fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        PanoBlock {
            deconv: ConvTranspose2d::new(cin, cout, 3, 2, 1, 1, 1.0, rng),
            dn: BatchNorm::new(cout),
            a: ConvBnRelu::new(cout, cout, 3, 1, rng),
            b: ConvBn::new(cout, rng),
            c: ConvBnRelu::new(cout, cout, 3, 1, rng),
            e: ConvBn::new(cout, rng),
            relu1: Relu::new(),
            relu2: Relu::new(),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let d = self.dn.infer(&self.deconv.infer(x));
        let mut p1 = self.b.infer(&self.a.infer(&d));
        p1.add_assign(&d);
        let p1 = Relu::infer(&p1);
        let mut p2 = self.e.infer(&self.c.infer(&p1));
        p2.add_assign(&p1);
        p2.add_assign(&d);
        Relu::infer(&p2)
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let d = self.deconv.forward(x, mode);
        let d = self.dn.forward(&d, mode);
        let h = self.a.forward(&d, mode);
        let mut p1 = self.b.forward(&h, mode);
        p1.add_assign(&d);
        let p1 = self.relu1.forward(&p1, mode);
        let h = self.c.forward(&p1, mode);
        let mut p2 = self.e.forward(&h, mode);
        p2.add_assign(&p1);
        p2.add_assign(&d);
        self.relu2.forward(&p2, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>, accumulate: bool) -> Tensor<T> {
        let g2 = self.relu2.backward(dy);
        let h = self.e.backward(&g2, accumulate);
        let mut dp1 = self.c.backward(&h, accumulate, true).expect("input gradient requested");
        dp1.add_assign(&g2);
        let g1 = self.relu1.backward(&dp1);
        let h = self.b.backward(&g1, accumulate);
        let mut dd = self.a.backward(&h, accumulate, true).expect("input gradient requested");
        dd.add_assign(&g1);
        dd.add_assign(&g2);
        let dd = self.dn.backward(&dd, accumulate);
        self.deconv
            .backward(&dd, accumulate, true)
            .expect("input gradient requested")
    }

    /// Zeroes every convolution inside the residual pairs (not the deconvolution).
    pub fn zero_residual_convs(&mut self) {
        for conv in [&mut self.a.conv, &mut self.b.conv, &mut self.c.conv, &mut self.e.conv] {
            conv.weight.value.iter_mut().for_each(|v| *v = T::zero());
            conv.bias.value.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// The normalised deconvolution output alone, for inspecting the skip path.
    pub fn skip_input(&self, x: &Tensor<T>) -> Tensor<T> {
        self.dn.infer(&self.deconv.infer(x))
    }
}

/// Parallel 1×1, 3×3, 5×5 and 7×7 convolutions to RGB, summed, then tanh.
pub struct PanoOut<T> {
    branches: Vec<Conv2d<T>>,
    tanh: Tanh<T>,
}

impl_module!(PanoOut {} [branches]);

impl<T: Scalar> PanoOut<T> {
    pub const KERNELS: [usize; 4] = [1, 3, 5, 7];

    fn new(cin: usize, gain: f64, rng: &mut Rng) -> Self {
        // four summed branches: split the gain so the sum keeps its scale
        let g = gain / 2.0;
        PanoOut {
            branches: Self::KERNELS.iter().map(|&k| Conv2d::new(cin, 3, k, 1, k / 2, g, rng)).collect(),
            tanh: Tanh::new(),
        }
    }

    fn sum(&self, outs: Vec<Tensor<T>>) -> Tensor<T> {
        let mut it = outs.into_iter();
        let mut acc = it.next().expect("four branches");
        for o in it {
            acc.add_assign(&o);
        }
        acc
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        Tanh::infer(&self.sum(self.branches.iter().map(|b| b.infer(x)).collect()))
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let outs = self.branches.iter_mut().map(|b| b.forward(x, mode)).collect();
        let s = self.sum(outs);
        self.tanh.forward(&s, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>, accumulate: bool) -> Tensor<T> {
        let d = self.tanh.backward(dy);
        let mut dx: Option<Tensor<T>> = None;
        for b in &mut self.branches {
            let g = b.backward(&d, accumulate, true).expect("input gradient requested");
            match dx.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => dx = Some(g),
            }
        }
        dx.expect("four branches")
    }
}

/// Per-call switches of the panorama generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanoInputs {
    /// Secondary template injection; when false the template map is all zeros.
    pub inject_template: bool,
    /// When false the layer encoder is bypassed and the encoded map is all zeros.
    pub use_encoder: bool,
}

impl Default for PanoInputs {
    fn default() -> Self {
        PanoInputs {
            inject_template: true,
            use_encoder: true,
        }
    }
}

/// Encoder over the stacked layers, template fusion, PanoBlock decoder, multi-scale output.
pub struct PanoramaGenerator<T> {
    mapper: TemplateMapper<T>,
    encoder: Vec<ConvBnRelu<T>>,
    fusion: Vec<ConvBnRelu<T>>,
    decoder: Vec<PanoBlock<T>>,
    out: PanoOut<T>,
    encoded_channels: usize,
    template_channels: usize,
    trainable: bool,
    last: Option<PanoInputs>,
}

impl_module!(PanoramaGenerator { mapper, out } [encoder, fusion, decoder]);

pub const PANORAMA_INPUT_CHANNELS: usize = 3 * Component::ALL.len();

impl<T: Scalar> PanoramaGenerator<T> {
    pub fn new(arch: &GeneratorArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let n = arch.doublings()?;
        let p = &arch.panorama;
        let mapper = TemplateMapper::new(arch.d, p.template_channels, rng);
        let mut cin = PANORAMA_INPUT_CHANNELS;
        let mut encoder = Vec::new();
        for &c in tail(&p.encoder, n) {
            encoder.push(ConvBnRelu::new(cin, c, 3, 2, rng));
            cin = c;
        }
        let encoded_channels = cin;
        let fusion = vec![
            ConvBnRelu::new(encoded_channels + p.template_channels, p.fusion, 3, 1, rng),
            ConvBnRelu::new(p.fusion, p.fusion, 3, 1, rng),
        ];
        let mut cin = p.fusion;
        let mut decoder = Vec::new();
        for &c in tail(&p.decoder, n) {
            decoder.push(PanoBlock::new(cin, c, rng));
            cin = c;
        }
        Ok(PanoramaGenerator {
            mapper,
            encoder,
            fusion,
            decoder,
            out: PanoOut::new(cin, arch.out_gain, rng),
            encoded_channels,
            template_channels: p.template_channels,
            trainable: true,
            last: None,
        })
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.trainable = flag;
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn input_dim(&self) -> usize {
        self.mapper.input_dim()
    }

    pub fn encoder_input_channels(&self) -> usize {
        self.encoder[0].conv.in_channels
    }

    pub fn decoder_blocks_mut(&mut self) -> &mut [PanoBlock<T>] {
        &mut self.decoder
    }

    fn check_layers(&self, layers: &Tensor<T>, t: &Tensor<T>) -> Result<()> {
        let s = layers.shape();
        if s.len() != 4 || s[1] != PANORAMA_INPUT_CHANNELS {
            return Err(Error::Arity(format!(
                "panorama generator takes {} stacked layers ({PANORAMA_INPUT_CHANNELS} channels), got {s:?}",
                Component::ALL.len()
            )));
        }
        check_templates(t, self.input_dim())?;
        if s[0] != t.batch() {
            return Err(Error::Dimension(format!("{} layer stacks but {} templates", s[0], t.batch())));
        }
        Ok(())
    }

    /// Spatial sizes after each encoder block.
    pub fn encoder_trajectory(&self, layers: &Tensor<T>) -> Vec<usize> {
        let mut h = layers.clone();
        let mut sizes = vec![h.shape()[2]];
        for b in &self.encoder {
            h = b.infer(&h);
            sizes.push(h.shape()[2]);
        }
        sizes
    }

    /// Spatial sizes after the fusion map and each decoder block.
    pub fn decoder_trajectory(&self, layers: &Tensor<T>, t: &Tensor<T>) -> Result<Vec<usize>> {
        let mut h = self.fused_infer(layers, t, PanoInputs::default())?;
        let mut sizes = vec![h.shape()[2]];
        for b in &self.decoder {
            h = b.infer(&h);
            sizes.push(h.shape()[2]);
        }
        Ok(sizes)
    }

    fn fused_infer(&self, layers: &Tensor<T>, t: &Tensor<T>, inputs: PanoInputs) -> Result<Tensor<T>> {
        self.check_layers(layers, t)?;
        let n = t.batch();
        let enc = if inputs.use_encoder {
            let mut h = layers.clone();
            for b in &self.encoder {
                h = b.infer(&h);
            }
            h
        } else {
            Tensor::zeros(&[n, self.encoded_channels, 4, 4])
        };
        let tmap = if inputs.inject_template {
            self.mapper.infer(t)?
        } else {
            Tensor::zeros(&[n, self.template_channels, 4, 4])
        };
        let mut h = Tensor::concat_channels(&[&enc, &tmap]);
        for f in &self.fusion {
            h = f.infer(&h);
        }
        Ok(h)
    }

    /// `layers`: `[N, 15, H, W]` (five RGB layers stacked in component order); `t`: `[N, d]`.
    pub fn infer(&self, layers: &Tensor<T>, t: &Tensor<T>, inputs: PanoInputs) -> Result<Tensor<T>> {
        let mut h = self.fused_infer(layers, t, inputs)?;
        for b in &self.decoder {
            h = b.infer(&h);
        }
        Ok(self.out.infer(&h))
    }

    pub fn forward(&mut self, layers: &Tensor<T>, t: &Tensor<T>, inputs: PanoInputs, mode: Mode) -> Result<Tensor<T>> {
        self.check_layers(layers, t)?;
        let mode = effective(mode, self.trainable);
        let n = t.batch();
        let enc = if inputs.use_encoder {
            let mut h = layers.clone();
            for b in &mut self.encoder {
                h = b.forward(&h, mode);
            }
            h
        } else {
            Tensor::zeros(&[n, self.encoded_channels, 4, 4])
        };
        let tmap = if inputs.inject_template {
            self.mapper.forward(t, mode)?
        } else {
            Tensor::zeros(&[n, self.template_channels, 4, 4])
        };
        let mut h = Tensor::concat_channels(&[&enc, &tmap]);
        for f in &mut self.fusion {
            h = f.forward(&h, mode);
        }
        for b in &mut self.decoder {
            h = b.forward(&h, mode);
        }
        if mode.records() {
            self.last = Some(inputs);
        }
        Ok(self.out.forward(&h, mode))
    }

    /// Accumulates parameter gradients (when trainable). Returns the gradient
    /// w.r.t. the stacked layers when `want_layer_grad` and the encoder ran.
    pub fn backward(&mut self, dy: &Tensor<T>, want_layer_grad: bool) -> Result<Option<Tensor<T>>> {
        let inputs = self
            .last
            .take()
            .ok_or_else(|| Error::State("panorama backward without a recorded forward".into()))?;
        let acc = self.trainable;
        let mut d = self.out.backward(dy, acc);
        for b in self.decoder.iter_mut().rev() {
            d = b.backward(&d, acc);
        }
        for f in self.fusion.iter_mut().rev() {
            d = f.backward(&d, acc, true).expect("input gradient requested");
        }
        let parts = d.split_channels(&[self.encoded_channels, self.template_channels]);
        if inputs.inject_template {
            self.mapper.backward(&parts[1], acc);
        }
        if !inputs.use_encoder {
            return Ok(None);
        }
        let mut d = parts[0].clone();
        for (i, b) in self.encoder.iter_mut().enumerate().rev() {
            match b.backward(&d, acc, i > 0 || want_layer_grad) {
                Some(g) => d = g,
                None => return Ok(None),
            }
        }
        Ok(Some(d))
    }

    pub fn apply_update(&mut self, opt: &mut Adam) {
        if self.trainable {
            opt.step(self);
        }
    }
}

/// Stacks five `[N, 3, H, W]` layers into `[N, 15, H, W]` in component order.
pub fn stack_layers<T: Scalar>(layers: &BTreeMap<Component, Tensor<T>>) -> Result<Tensor<T>> {
    if layers.len() != Component::ALL.len() || Component::ALL.iter().any(|c| !layers.contains_key(c)) {
        return Err(Error::Arity(format!(
            "expected exactly {} layers, got {}",
            Component::ALL.len(),
            layers.len()
        )));
    }
    let parts: Vec<&Tensor<T>> = Component::ALL.iter().map(|c| &layers[c]).collect();
    Ok(Tensor::concat_channels(&parts))
}

/// Runs the panorama generator on five layer images and one template.
pub fn generate_panorama<T: Scalar>(
    gen: &PanoramaGenerator<T>,
    layers: &[FaceImage<T>],
    t: &FacialTemplate<T>,
    inject_template: bool,
) -> Result<FaceImage<T>> {
    if layers.len() != Component::ALL.len() {
        return Err(Error::Arity(format!("expected {} layers, got {}", Component::ALL.len(), layers.len())));
    }
    let map: BTreeMap<Component, Tensor<T>> =
        Component::ALL.iter().zip(layers).map(|(c, l)| (*c, l.to_batch())).collect();
    let stacked = stack_layers(&map)?;
    let tb = Tensor::from_vec(&[1, t.dim()], t.values().to_vec())?;
    let inputs = PanoInputs {
        inject_template,
        use_encoder: true,
    };
    FaceImage::from_batch(&gen.infer(&stacked, &tb, inputs)?, 0)
}

/// Pixel-wise sum of layer images clipped to `[-1, 1]` (the no-panorama ablation).
pub fn superpose_layers<T: Scalar>(layers: &BTreeMap<Component, Tensor<T>>) -> Result<Tensor<T>> {
    let mut it = layers.values();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::Arity("no layers to superpose".into()))?
        .clone();
    for l in it {
        if l.shape() != acc.shape() {
            return Err(Error::Dimension("layers differ in shape".into()));
        }
        acc.add_assign(l);
    }
    let one = T::one();
    Ok(acc.map(|v| v.max(-one).min(one)))
}

pub fn layer_key(c: Component) -> String {
    match c {
        Component::Skin => "mg_skin".into(),
        other => format!("fg_{}", other.name()),
    }
}

/// The full generator family of one experiment.
pub struct GeneratorSet<T> {
    pub arch: GeneratorArch,
    pub layers: BTreeMap<Component, LayerGenerator<T>>,
    pub panorama: Option<PanoramaGenerator<T>>,
    /// How the panorama generator is driven at inference time.
    pub pano_inputs: PanoInputs,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorManifest {
    pub kind: String,
    pub d: usize,
    pub arch: GeneratorArch,
    pub stage: u8,
    pub seed: u64,
    pub dtype: String,
    pub generators: Vec<String>,
    #[serde(default)]
    pub pano_inputs: PanoInputs,
}

const GEN_KIND: &str = "lbfti-generators";

impl<T: Scalar> GeneratorSet<T> {
    /// Randomly initialised generators for `components` (plus the panorama
    /// generator when `panorama`).
    pub fn new(arch: GeneratorArch, components: &[Component], panorama: bool, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut layers = BTreeMap::new();
        for &c in components {
            // one stream per generator so adding or removing one never perturbs the others
            let mut rng = seeded_rng(seed.wrapping_mul(1_000_003).wrapping_add(c.index() as u64 + 1));
            layers.insert(c, LayerGenerator::new(c, &arch, &mut rng)?);
        }
        let panorama = if panorama {
            let mut rng = seeded_rng(seed.wrapping_mul(1_000_003).wrapping_add(100));
            Some(PanoramaGenerator::new(&arch, &mut rng)?)
        } else {
            None
        };
        Ok(GeneratorSet {
            arch,
            layers,
            panorama,
            pano_inputs: PanoInputs::default(),
            seed,
        })
    }

    pub fn full(arch: GeneratorArch, seed: u64) -> Result<Self> {
        Self::new(arch, &Component::ALL, true, seed)
    }

    /// A deep copy of parameters and running statistics (optimizer moments are not copied).
    pub fn try_clone(&self) -> Result<Self> {
        let comps: Vec<Component> = self.layers.keys().copied().collect();
        let mut out = Self::new(self.arch.clone(), &comps, self.panorama.is_some(), self.seed)?;
        let sd = self.state_dict();
        for (c, g) in &mut out.layers {
            g.load_state_dict(&layer_key(*c), &sd)?;
            g.set_trainable(self.layers[c].is_trainable());
        }
        if let (Some(dst), Some(src)) = (&mut out.panorama, &self.panorama) {
            dst.load_state_dict("pano", &sd)?;
            dst.set_trainable(src.is_trainable());
        }
        out.pano_inputs = self.pano_inputs;
        Ok(out)
    }

    /// Drops every layer generator not in `components`, and the panorama
    /// generator unless `panorama`.
    pub fn retain(&mut self, components: &[Component], panorama: bool) {
        self.layers.retain(|c, _| components.contains(c));
        if !panorama {
            self.panorama = None;
        }
    }

    pub fn panorama(&self) -> Result<&PanoramaGenerator<T>> {
        self.panorama
            .as_ref()
            .ok_or_else(|| Error::State("this generator set has no panorama generator".into()))
    }

    pub fn panorama_mut(&mut self) -> Result<&mut PanoramaGenerator<T>> {
        self.panorama
            .as_mut()
            .ok_or_else(|| Error::State("this generator set has no panorama generator".into()))
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.layers.keys().map(|c| layer_key(*c)).collect();
        if self.panorama.is_some() {
            v.push("pano".into());
        }
        v
    }

    pub fn state_dict(&self) -> StateDict<T> {
        let mut sd = StateDict::new();
        for (c, g) in &self.layers {
            sd.extend(g.state_dict(&layer_key(*c)));
        }
        if let Some(p) = &self.panorama {
            sd.extend(p.state_dict("pano"));
        }
        sd
    }

    /// SHA-256 of one generator's parameters and running statistics.
    pub fn checksum_layer(&self, c: Component) -> Result<String> {
        let g = self
            .layers
            .get(&c)
            .ok_or_else(|| Error::State(format!("no {} generator", c.name())))?;
        Ok(crate::nn::checksum_state(g))
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for g in self.layers.values_mut() {
            g.set_trainable(flag);
        }
        if let Some(p) = &mut self.panorama {
            p.set_trainable(flag);
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.values().map(|g| g.num_params()).sum::<usize>()
            + self.panorama.as_ref().map_or(0, |p| p.num_params())
    }

    pub fn manifest(&self, stage: Stage) -> GeneratorManifest {
        GeneratorManifest {
            kind: GEN_KIND.into(),
            d: self.arch.d,
            arch: self.arch.clone(),
            stage: stage.number(),
            seed: self.seed,
            dtype: T::DTYPE.into(),
            generators: self.names(),
            pano_inputs: self.pano_inputs,
        }
    }

    /// `[N, 3, H, W]` layer outputs of every component with inference
    /// statistics; components without a generator yield blank layers.
    pub fn layer_outputs(&self, t: &Tensor<T>) -> Result<BTreeMap<Component, Tensor<T>>> {
        check_templates(t, self.arch.d)?;
        let side = self.arch.resolution;
        let mut out = BTreeMap::new();
        for c in Component::ALL {
            let y = match self.layers.get(&c) {
                Some(g) => g.infer(t)?,
                None => Tensor::zeros(&[t.batch(), 3, side, side]),
            };
            out.insert(c, y);
        }
        Ok(out)
    }

    /// Templates `[N, d]` to reconstructions `[N, 3, H, W]`: the panorama
    /// generator over the stacked layers, or their clipped sum without one.
    pub fn reconstruct(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let layers = self.layer_outputs(t)?;
        match &self.panorama {
            Some(p) => {
                let inputs = PanoInputs {
                    use_encoder: self.pano_inputs.use_encoder && !self.layers.is_empty(),
                    ..self.pano_inputs
                };
                p.infer(&stack_layers(&layers)?, t, inputs)
            }
            None => {
                if self.layers.is_empty() {
                    return Err(Error::State("generator set has neither layers nor a panorama generator".into()));
                }
                superpose_layers(&layers)
            }
        }
    }

    pub fn reconstruct_one(&self, t: &FacialTemplate<T>) -> Result<FaceImage<T>> {
        let y = self.reconstruct(&Tensor::from_vec(&[1, t.dim()], t.values().to_vec())?)?;
        FaceImage::from_batch(&y, 0)
    }

    pub fn save(&self, path: &Path, stage: Stage) -> Result<()> {
        write_archive(path, &self.manifest(stage), &self.state_dict())
    }

    pub fn read_manifest(path: &Path) -> Result<GeneratorManifest> {
        let (m, _): (GeneratorManifest, StateDict<T>) = read_archive(path)?;
        Ok(m)
    }

    /// Loads a checkpoint, checking its template dimension against `expected_d` when given.
    pub fn load(path: &Path, expected_d: Option<usize>) -> Result<(Self, Stage)> {
        let (m, sd): (GeneratorManifest, StateDict<T>) = read_archive(path)?;
        if m.kind != GEN_KIND {
            return Err(Error::format("manifest.json", format!("kind `{}` is not a generator checkpoint", m.kind)));
        }
        if m.d != m.arch.d {
            return Err(Error::format("manifest.json", "template dimension disagrees with the architecture"));
        }
        if let Some(d) = expected_d {
            if d != m.d {
                return Err(Error::Dimension(format!("checkpoint expects templates of length {}, got {d}", m.d)));
            }
        }
        let stage = Stage::from_number(m.stage).map_err(|e| Error::format("manifest.json", e.to_string()))?;
        let mut comps = Vec::new();
        let mut pano = false;
        for name in &m.generators {
            if name == "pano" {
                pano = true;
            } else {
                let c = Component::ALL
                    .into_iter()
                    .find(|c| &layer_key(*c) == name)
                    .ok_or_else(|| Error::format(name.as_str(), "unknown generator name"))?;
                comps.push(c);
            }
        }
        let mut set = Self::new(m.arch.clone(), &comps, pano, m.seed)?;
        set.pano_inputs = m.pano_inputs;
        for (c, g) in &mut set.layers {
            g.load_state_dict(&layer_key(*c), &sd)?;
        }
        if let Some(p) = &mut set.panorama {
            p.load_state_dict("pano", &sd)?;
        }
        Ok((set, stage))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch32() -> GeneratorArch {
        GeneratorArch {
            d: 8,
            resolution: 32,
            layer: LayerSchedule { c0: 4, blocks: vec![4, 4] },
            panorama: PanoSchedule {
                encoder: vec![4, 4, 4],
                template_channels: 2,
                fusion: 4,
                decoder: vec![4, 4, 4],
            },
            out_gain: 1.0,
        }
    }

    fn templates(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        use rand_distr::{Distribution, Normal};
        let mut rng = seeded_rng(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_vec(&[n, d], (0..n * d).map(|_| nd.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn resolution_validation() {
        let mut a = arch32();
        a.resolution = 48;
        assert!(a.validate().is_err());
        a.resolution = 64;
        assert!(a.validate().is_err(), "schedules too short for 64");
    }

    #[test]
    fn panorama_rejects_wrong_layer_count() {
        let mut rng = seeded_rng(0);
        let p = PanoramaGenerator::<f64>::new(&arch32(), &mut rng).unwrap();
        let imgs: Vec<FaceImage<f64>> = (0..4).map(|_| FaceImage::zeros(32).unwrap()).collect();
        let t = FacialTemplate::new(vec![0.5; 8]).unwrap();
        assert!(matches!(generate_panorama(&p, &imgs, &t, true), Err(Error::Arity(_))));
    }

    #[test]
    fn mapper_rejects_wrong_dimension() {
        let mut rng = seeded_rng(0);
        let g = LayerGenerator::<f64>::new(Component::Eyes, &arch32(), &mut rng).unwrap();
        let t = FacialTemplate::new(vec![0.5; 9]).unwrap();
        assert!(matches!(generate_layer(&g, &t), Err(Error::Dimension(_))));
    }

    #[test]
    fn frozen_generator_is_not_stepped() {
        let mut rng = seeded_rng(1);
        let mut g = LayerGenerator::<f64>::new(Component::Nose, &arch32(), &mut rng).unwrap();
        g.set_trainable(false);
        let before = crate::nn::checksum_state(&g);
        let mut opt = Adam::new(1e-2, Default::default());
        for _ in 0..3 {
            let y = g.forward(&templates(4, 8, 2), Mode::Train).unwrap();
            g.backward(&y);
            g.apply_update(&mut opt);
        }
        assert_eq!(crate::nn::checksum_state(&g), before);
    }

    #[test]
    fn superposition_clips() {
        let mut m = BTreeMap::new();
        m.insert(Component::Eyes, Tensor::<f64>::full(&[1, 3, 2, 2], 0.75));
        m.insert(Component::Skin, Tensor::<f64>::full(&[1, 3, 2, 2], 0.5));
        assert!(superpose_layers(&m).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
