//! Template extractors `E: image -> template` in two capability tiers.
//!
//! Every extractor can be queried ([`TemplateExtractor`]). Only extractors
//! that expose [`DifferentiableExtractor`] can sit inside a training objective;
//! wrapping one in [`QueryOnly`] hides that tier without changing values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, write_archive};
use crate::domain::{FaceImage, FacialTemplate};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, impl_module, seeded_rng, Adam, AdamConfig,
    ConvBnRelu, Linear, Mode, Module, Param,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_TEMPLATE_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorRole {
    Target,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorDescriptor {
    pub name: String,
    pub d: usize,
    pub normalized: bool,
    pub differentiable: bool,
    pub role: ExtractorRole,
}

impl ExtractorDescriptor {
    pub fn new(name: impl Into<String>, d: usize, normalized: bool, differentiable: bool, role: ExtractorRole) -> Result<Self> {
        if d < MIN_TEMPLATE_DIM {
            return Err(Error::Dimension(format!(
                "template dimension {d} is below the minimum of {MIN_TEMPLATE_DIM}"
            )));
        }
        Ok(ExtractorDescriptor {
            name: name.into(),
            d,
            normalized,
            differentiable,
            role,
        })
    }
}

/// Query access: images in, templates out.
pub trait TemplateExtractor<T: Scalar>: Send + Sync {
    fn descriptor(&self) -> &ExtractorDescriptor;

    /// `[N, 3, H, W] -> [N, d]`.
    fn extract_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>>;

    /// The gradient tier, if this extractor has one.
    fn differentiable(&mut self) -> Option<&mut dyn DifferentiableExtractor<T>> {
        None
    }
}

/// Gradient access through a frozen extractor.
pub trait DifferentiableExtractor<T: Scalar> {
    /// Same values as `extract_batch`, with the activations kept for one backward pass.
    fn forward_traced(&mut self, images: &Tensor<T>) -> Result<Tensor<T>>;

    /// Gradient of a scalar w.r.t. the traced images, given its gradient w.r.t. the templates.
    fn backward_input(&mut self, d_templates: &Tensor<T>) -> Result<Tensor<T>>;
}

pub fn extract<T: Scalar>(e: &dyn TemplateExtractor<T>, image: &FaceImage<T>) -> Result<FacialTemplate<T>> {
    let t = e.extract_batch(&image.to_batch())?;
    FacialTemplate::new(t.into_data())
}

/// A template together with the path back to the image pixels.
pub struct TracedTemplate<'a, T: Scalar> {
    pub template: FacialTemplate<T>,
    side: usize,
    tier: &'a mut dyn DifferentiableExtractor<T>,
}

impl<T: Scalar> TracedTemplate<'_, T> {
    /// `d_template` is the gradient of the scalar of interest w.r.t. the template; returns `[3, H, W]`.
    pub fn backward(self, d_template: &[T]) -> Result<Tensor<T>> {
        let d = self.template.dim();
        if d_template.len() != d {
            return Err(Error::Dimension(format!("gradient has length {}, template has {d}", d_template.len())));
        }
        let g = self.tier.backward_input(&Tensor::from_vec(&[1, d], d_template.to_vec())?)?;
        g.reshape(&[3, self.side, self.side])
    }
}

pub fn extract_differentiable<'a, T: Scalar>(
    e: &'a mut dyn TemplateExtractor<T>,
    image: &FaceImage<T>,
) -> Result<TracedTemplate<'a, T>> {
    let name = e.descriptor().name.clone();
    let tier = e
        .differentiable()
        .ok_or_else(|| Error::Capability(format!("extractor `{name}` is query-only")))?;
    let t = tier.forward_traced(&image.to_batch())?;
    Ok(TracedTemplate {
        template: FacialTemplate::new(t.into_data())?,
        side: image.side(),
        tier,
    })
}

/// Cosine similarity of two slices.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("templates of length {} and {}", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero-norm template".into()));
    }
    Ok(T::lit((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)))
}

pub fn similarity<T: Scalar>(a: &FacialTemplate<T>, b: &FacialTemplate<T>) -> Result<T> {
    cosine(a.values(), b.values())
}

/// Row-wise L2 normalisation of `[N, d]`; also returns the pre-normalisation norms.
pub(crate) fn l2_normalize_rows<T: Scalar>(z: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let d = z.sample_len();
    let tiny = T::lit(1e-12);
    let mut y = z.clone();
    let mut norms = Vec::with_capacity(z.batch());
    for row in y.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(tiny);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (y, norms)
}

/// Backward of [`l2_normalize_rows`]: `dz = (dy - y (y·dy)) / |z|`.
pub(crate) fn l2_normalize_rows_backward<T: Scalar>(y: &Tensor<T>, norms: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let d = y.sample_len();
    let mut dz = dy.clone();
    for ((row, yr), n) in dz.data_mut().chunks_mut(d).zip(y.data().chunks(d)).zip(norms) {
        let dot: T = row.iter().zip(yr).map(|(a, b)| *a * *b).sum();
        for (g, yv) in row.iter_mut().zip(yr) {
            *g = (*g - *yv * dot) / *n;
        }
    }
    dz
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyExtractorArch {
    pub d: usize,
    /// Output channels of the stride-2 convolution blocks.
    pub channels: Vec<usize>,
}

impl Default for ToyExtractorArch {
    fn default() -> Self {
        ToyExtractorArch {
            d: 512,
            channels: vec![16, 32, 64, 128, 128],
        }
    }
}

/// Strided conv blocks, global average pool, linear projection, L2 normalisation.
pub struct ToyNet<T> {
    blocks: Vec<ConvBnRelu<T>>,
    head: Linear<T>,
    pooled_hw: (usize, usize),
    unit: Option<(Tensor<T>, Vec<T>)>,
}

impl_module!(ToyNet { head } [blocks]);

impl<T: Scalar> ToyNet<T> {
    pub fn new(arch: &ToyExtractorArch, seed: u64) -> Result<Self> {
        if arch.channels.is_empty() {
            return Err(Error::Dimension("extractor needs at least one conv block".into()));
        }
        let mut rng = seeded_rng(seed);
        let mut cin = 3;
        let mut blocks = Vec::new();
        for &c in &arch.channels {
            blocks.push(ConvBnRelu::new(cin, c, 3, 2, &mut rng));
            cin = c;
        }
        Ok(ToyNet {
            blocks,
            head: Linear::new(cin, arch.d, 1.0, &mut rng),
            pooled_hw: (0, 0),
            unit: None,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let min = 1usize << self.blocks.len();
        if s.len() != 4 || s[1] != 3 || s[2] < min || s[3] < min {
            return Err(Error::Dimension(format!(
                "extractor expects [N, 3, H, W] with H, W >= {min}, got {s:?}"
            )));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&h);
        }
        let z = self.head.infer(&global_avg_pool(&h));
        Ok(l2_normalize_rows(&z).0)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, mode);
        }
        let (_, _, ph, pw) = h.dims4();
        self.pooled_hw = (ph, pw);
        let z = self.head.forward(&global_avg_pool(&h), mode);
        let (y, norms) = l2_normalize_rows(&z);
        if mode.records() {
            self.unit = Some((y.clone(), norms));
        }
        Ok(y)
    }

    /// Backward from template gradients to input gradients; parameter
    /// gradients accumulate only when `accumulate`.
    pub fn backward(&mut self, dy: &Tensor<T>, accumulate: bool) -> Result<Tensor<T>> {
        let (y, norms) = self
            .unit
            .take()
            .ok_or_else(|| Error::State("extractor backward without a traced forward".into()))?;
        if dy.shape() != y.shape() {
            return Err(Error::Dimension(format!("template gradient {:?} vs {:?}", dy.shape(), y.shape())));
        }
        let dz = l2_normalize_rows_backward(&y, &norms, dy);
        let dp = self.head.backward(&dz, accumulate);
        let (ph, pw) = self.pooled_hw;
        let mut d = global_avg_pool_backward(&dp, ph, pw);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d, accumulate, true).expect("input gradient requested");
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractorManifest {
    kind: String,
    descriptor: ExtractorDescriptor,
    arch: ToyExtractorArch,
    seed: u64,
    dtype: String,
}

const TOY_KIND: &str = "toy-extractor";

/// The trainable desk-scale extractor.
pub struct ToyExtractor<T> {
    descriptor: ExtractorDescriptor,
    arch: ToyExtractorArch,
    seed: u64,
    net: Option<ToyNet<T>>,
}

impl<T: Scalar> ToyExtractor<T> {
    /// Randomly initialised (untrained) extractor.
    pub fn new(name: impl Into<String>, arch: ToyExtractorArch, seed: u64) -> Result<Self> {
        let descriptor = ExtractorDescriptor::new(name, arch.d, true, true, ExtractorRole::Target)?;
        let net = ToyNet::new(&arch, seed)?;
        Ok(ToyExtractor {
            descriptor,
            arch,
            seed,
            net: Some(net),
        })
    }

    /// Declared but without weights; every query fails with a state error.
    pub fn uninitialized(name: impl Into<String>, arch: ToyExtractorArch) -> Result<Self> {
        let descriptor = ExtractorDescriptor::new(name, arch.d, true, true, ExtractorRole::Target)?;
        Ok(ToyExtractor {
            descriptor,
            arch,
            seed: 0,
            net: None,
        })
    }

    pub fn arch(&self) -> &ToyExtractorArch {
        &self.arch
    }

    pub fn set_role(&mut self, role: ExtractorRole) {
        self.descriptor.role = role;
    }

    pub fn rename(&mut self, name: impl Into<String>) {
        self.descriptor.name = name.into();
    }

    fn net(&self) -> Result<&ToyNet<T>> {
        self.net
            .as_ref()
            .ok_or_else(|| Error::State(format!("extractor `{}` is not initialised", self.descriptor.name)))
    }

    fn net_mut(&mut self) -> Result<&mut ToyNet<T>> {
        let name = &self.descriptor.name;
        self.net
            .as_mut()
            .ok_or_else(|| Error::State(format!("extractor `{name}` is not initialised")))
    }

    pub fn checksum(&self) -> Result<String> {
        Ok(crate::nn::checksum_state(self.net()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = ExtractorManifest {
            kind: TOY_KIND.into(),
            descriptor: self.descriptor.clone(),
            arch: self.arch.clone(),
            seed: self.seed,
            dtype: T::DTYPE.into(),
        };
        write_archive(path, &manifest, &self.net()?.state_dict(""))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, sd): (ExtractorManifest, _) = read_archive(path)?;
        if m.kind != TOY_KIND {
            return Err(Error::format("manifest.json", format!("kind `{}` is not a toy extractor", m.kind)));
        }
        let mut net = ToyNet::new(&m.arch, m.seed)?;
        net.load_state_dict("", &sd)?;
        Ok(ToyExtractor {
            descriptor: m.descriptor,
            arch: m.arch,
            seed: m.seed,
            net: Some(net),
        })
    }
}

impl<T: Scalar> TemplateExtractor<T> for ToyExtractor<T> {
    fn descriptor(&self) -> &ExtractorDescriptor {
        &self.descriptor
    }

    fn extract_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.net()?.infer(images)
    }

    fn differentiable(&mut self) -> Option<&mut dyn DifferentiableExtractor<T>> {
        Some(self)
    }
}

impl<T: Scalar> DifferentiableExtractor<T> for ToyExtractor<T> {
    fn forward_traced(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.net_mut()?.forward(images, Mode::Trace)
    }

    fn backward_input(&mut self, d_templates: &Tensor<T>) -> Result<Tensor<T>> {
        self.net_mut()?.backward(d_templates, false)
    }
}

/// Hides the gradient tier of the wrapped extractor.
pub struct QueryOnly<E> {
    inner: E,
    descriptor: ExtractorDescriptor,
}

impl<E> QueryOnly<E> {
    pub fn new<T: Scalar>(inner: E) -> Self
    where
        E: TemplateExtractor<T>,
    {
        let mut descriptor = inner.descriptor().clone();
        descriptor.differentiable = false;
        QueryOnly { inner, descriptor }
    }

    pub fn into_inner(self) -> E {
        self.inner
    }
}

impl<T: Scalar, E: TemplateExtractor<T>> TemplateExtractor<T> for QueryOnly<E> {
    fn descriptor(&self) -> &ExtractorDescriptor {
        &self.descriptor
    }

    fn extract_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.inner.extract_batch(images)
    }
}

/// External query-only extractor: runs `program [args..] <image.png>` per
/// image and reads a JSON array of numbers from its stdout.
pub struct CommandExtractor {
    descriptor: ExtractorDescriptor,
    program: PathBuf,
    args: Vec<String>,
}

impl CommandExtractor {
    pub fn new(descriptor: ExtractorDescriptor, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        let mut descriptor = descriptor;
        descriptor.differentiable = false;
        CommandExtractor {
            descriptor,
            program: program.into(),
            args,
        }
    }

    fn run_one(&self, path: &Path) -> Result<Vec<f64>> {
        let out = Command::new(&self.program).args(&self.args).arg(path).output()?;
        let name = &self.descriptor.name;
        if !out.status.success() {
            return Err(Error::State(format!(
                "extractor `{name}` exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let v: Vec<f64> = serde_json::from_slice(&out.stdout)
            .map_err(|e| Error::format(name.as_str(), format!("stdout is not a JSON number array: {e}")))?;
        if v.len() != self.descriptor.d {
            return Err(Error::Dimension(format!(
                "extractor `{name}` returned {} values, declared d = {}",
                v.len(),
                self.descriptor.d
            )));
        }
        Ok(v)
    }
}

impl<T: Scalar> TemplateExtractor<T> for CommandExtractor {
    fn descriptor(&self) -> &ExtractorDescriptor {
        &self.descriptor
    }

    fn extract_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let dir = tempfile::tempdir()?;
        let mut out = Vec::with_capacity(images.batch() * self.descriptor.d);
        for i in 0..images.batch() {
            let img = FaceImage::from_batch(images, i)?;
            let p = dir.path().join(format!("{i}.png"));
            crate::io::save_image(&img, &p)?;
            out.extend(self.run_one(&p)?.into_iter().map(T::lit));
        }
        Tensor::from_vec(&[images.batch(), self.descriptor.d], out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Additive cosine margin applied to the true-class logit.
    pub margin: f64,
    /// Logit scale.
    pub scale: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        ExtractorTrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 32,
            margin: 0.35,
            scale: 30.0,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// Large-margin cosine classifier over `[N, d]` unit embeddings.
struct MarginHead<T> {
    weight: Param<T>,
}

impl_module!(MarginHead { weight });

impl<T: Scalar> MarginHead<T> {
    /// Returns the mean loss and the gradient w.r.t. the embeddings; accumulates weight gradients.
    fn loss_and_backward(&mut self, emb: &Tensor<T>, labels: &[usize], scale: f64, margin: f64) -> (f64, Tensor<T>) {
        let d = emb.sample_len();
        let k = self.weight.shape[0];
        let w = &self.weight.value;
        let wn: Vec<f64> = w
            .chunks(d)
            .map(|r| r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let n = labels.len();
        let mut demb = Tensor::zeros(emb.shape());
        let mut dw = vec![0.0f64; k * d];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let e = emb.sample(i);
            let cos: Vec<f64> = (0..k)
                .map(|j| {
                    let dot: f64 = w[j * d..(j + 1) * d].iter().zip(e).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    dot / wn[j]
                })
                .collect();
            let logits: Vec<f64> = cos
                .iter()
                .enumerate()
                .map(|(j, c)| scale * (c - if j == y { margin } else { 0.0 }))
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            loss += -(logits[y] - mx - z.ln());
            let de = demb.sample_mut(i);
            for j in 0..k {
                let p = (logits[j] - mx).exp() / z;
                let g = (p - if j == y { 1.0 } else { 0.0 }) * scale / n as f64;
                if g == 0.0 {
                    continue;
                }
                let wr = &w[j * d..(j + 1) * d];
                // d cos_j / d e = ŵ_j ; d cos_j / d w_j = (e - ŵ_j cos_j) / |w_j|
                for t in 0..d {
                    let what = wr[t].as_f64() / wn[j];
                    de[t] += T::lit(g * what);
                    dw[j * d + t] += g * (e[t].as_f64() - what * cos[j]) / wn[j];
                }
            }
        }
        for (gr, v) in self.weight.grad.iter_mut().zip(dw) {
            *gr += T::lit(v);
        }
        (loss / n as f64, demb)
    }
}

/// Per-epoch mean training loss of the extractor.
pub type ExtractorHistory = Vec<f64>;

/// Trains a toy extractor to separate the identities in `subjects`.
pub fn train_toy_extractor<T: Scalar>(
    name: &str,
    images: &[FaceImage<T>],
    subjects: &[String],
    arch: &ToyExtractorArch,
    cfg: &ExtractorTrainConfig,
) -> Result<(ToyExtractor<T>, ExtractorHistory)> {
    if images.len() != subjects.len() {
        return Err(Error::Arity(format!("{} images but {} subject labels", images.len(), subjects.len())));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in subjects {
        *counts.entry(s.as_str()).or_default() += 1;
    }
    let usable = counts.values().filter(|&&c| c >= 2).count();
    if usable < 2 {
        return Err(Error::Data(format!(
            "need at least 2 identities with 2 or more images each, found {usable}"
        )));
    }
    if cfg.batch_size < 2 || cfg.epochs == 0 {
        return Err(Error::Config {
            key: "extractor.train".into(),
            detail: "batch_size must be >= 2 and epochs >= 1".into(),
        });
    }
    let index: BTreeMap<&str, usize> = counts.keys().enumerate().map(|(i, s)| (*s, i)).collect();
    let labels: Vec<usize> = subjects.iter().map(|s| index[s.as_str()]).collect();

    let mut ext = ToyExtractor::new(name, arch.clone(), cfg.seed)?;
    let mut rng = seeded_rng(cfg.seed ^ 0x5eed_f00d);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let k = index.len();
    let mut head = MarginHead {
        weight: Param::new(&[k, arch.d], (0..k * arch.d).map(|_| T::lit(normal.sample(&mut rng))).collect()),
    };
    let mut opt_net = Adam::new(cfg.learning_rate, cfg.adam);
    let mut opt_head = Adam::new(cfg.learning_rate * 10.0, cfg.adam);
    let sample_shape = images[0].pixels().shape().to_vec();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let net = ext.net_mut()?;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // a single-sample batch has no batch statistics
            if chunk.len() < 2 {
                continue;
            }
            let xs: Vec<&[T]> = chunk.iter().map(|&i| images[i].data()).collect();
            let x = Tensor::stack(&xs, &sample_shape)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let emb = net.forward(&x, Mode::Train)?;
            let (loss, demb) = head.loss_and_backward(&emb, &y, cfg.scale, cfg.margin);
            net.backward(&demb, true)?;
            opt_net.step(net);
            opt_head.step(&mut head);
            sum += loss;
            batches += 1;
        }
        history.push(sum / batches.max(1) as f64);
    }
    Ok((ext, history))
}
