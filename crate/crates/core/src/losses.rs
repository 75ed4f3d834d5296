//! Reconstruction losses, their gradients, and the per-stage composite objectives.
//!
//! Batched losses are means over the batch of the per-sample formulas, so a
//! batch of one reproduces the single-image definitions exactly.

use serde::{Deserialize, Serialize};

use crate::domain::{AttributeVector, Component, FaceImage, FacialTemplate, ATTRIBUTE_COUNT};
use crate::error::{Error, Result};
use crate::extractor::{l2_normalize_rows, l2_normalize_rows_backward, TemplateExtractor};
use crate::nn::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, seeded_rng, Conv2d, Linear, Mode,
    Relu,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(1/d) Σ (t_i − t̂_i)²`.
pub fn template_loss<T: Scalar>(t: &FacialTemplate<T>, t_hat: &FacialTemplate<T>) -> Result<T> {
    if t.dim() != t_hat.dim() {
        return Err(Error::Dimension(format!("templates of length {} and {}", t.dim(), t_hat.dim())));
    }
    Ok(mse(t.values(), t_hat.values()))
}

/// Mean squared error over all H·W·3 entries.
pub fn pixel_loss<T: Scalar>(x: &FaceImage<T>, x_hat: &FaceImage<T>) -> Result<T> {
    same_shape(x.pixels(), x_hat.pixels(), "pixel loss")?;
    Ok(mse(x.data(), x_hat.data()))
}

/// `(1/40) Σ |A(x)_i − A(x̂)_i|`.
pub fn attribute_loss<T: Scalar>(ax: &AttributeVector<T>, ax_hat: &AttributeVector<T>) -> Result<T> {
    Ok(mae(ax.probs(), ax_hat.probs()))
}

/// `Σ_l ‖φ_l(x) − φ_l(x̂)‖² / (H_l W_l C_l)`.
pub fn perceptual_loss<T: Scalar>(
    x: &FaceImage<T>,
    x_hat: &FaceImage<T>,
    fnet: &dyn FeatureNetwork<T>,
) -> Result<T> {
    same_shape(x.pixels(), x_hat.pixels(), "perceptual loss")?;
    let fa = fnet.features(&x.to_batch())?;
    let fb = fnet.features(&x_hat.to_batch())?;
    Ok(fa.iter().zip(&fb).map(|(a, b)| mse(a.data(), b.data())).sum())
}

pub(crate) fn mse<T: Scalar>(a: &[T], b: &[T]) -> T {
    let s: T = a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
    s / T::from_usize(a.len()).unwrap()
}

fn mae<T: Scalar>(a: &[T], b: &[T]) -> T {
    let s: T = a.iter().zip(b).map(|(x, y)| (*x - *y).abs()).sum();
    s / T::from_usize(a.len()).unwrap()
}

/// Gradient of `scale · mean((pred − target)²)` w.r.t. `pred`.
fn mse_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, scale: T) -> Tensor<T> {
    let k = scale * T::lit(2.0) / T::from_usize(pred.len()).unwrap();
    pred.zip_map(target, |p, t| k * (p - t))
}

/// Pretrained-style network exposing intermediate feature maps ("taps").
pub trait FeatureNetwork<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// One `[N, C_l, H_l, W_l]` tensor per tap, ordered by decreasing spatial size.
    fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>>;

    /// Like `features`, keeping activations for one call to `backward`.
    fn trace(&mut self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>>;

    /// Input gradient given gradients at every tap of the last trace.
    fn backward(&mut self, d_taps: &[Tensor<T>]) -> Result<Tensor<T>>;
}

/// `φ_l(x) = s_l · x`; reduces the perceptual loss to scaled pixel losses.
pub struct ScaledIdentityTaps {
    scales: Vec<f64>,
}

impl ScaledIdentityTaps {
    pub fn new(scales: Vec<f64>) -> Self {
        ScaledIdentityTaps { scales }
    }

    pub fn identity() -> Self {
        Self::new(vec![1.0])
    }
}

impl<T: Scalar> FeatureNetwork<T> for ScaledIdentityTaps {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self
            .scales
            .iter()
            .map(|&s| {
                let mut t = x.clone();
                t.scale(T::lit(s));
                t
            })
            .collect())
    }

    fn trace(&mut self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.features(x)
    }

    fn backward(&mut self, d_taps: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut out = Tensor::zeros(d_taps[0].shape());
        for (d, &s) in d_taps.iter().zip(&self.scales) {
            out.add_scaled(d, T::lit(s));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TapNetConfig {
    /// Channels of each tap; a 2×2 average pool separates consecutive taps.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for TapNetConfig {
    fn default() -> Self {
        TapNetConfig {
            channels: vec![8, 16, 32, 32, 32],
            seed: 7,
        }
    }
}

/// Fixed random convolutional feature network: conv3×3 + ReLU per tap.
pub struct TapNet<T> {
    convs: Vec<Conv2d<T>>,
    relus: Vec<Relu<T>>,
}

impl<T: Scalar> TapNet<T> {
    pub fn new(cfg: &TapNetConfig) -> Self {
        let mut rng = seeded_rng(cfg.seed);
        let mut cin = 3;
        let mut convs = Vec::new();
        for &c in &cfg.channels {
            convs.push(Conv2d::new(cin, c, 3, 1, 1, 1.0, &mut rng));
            cin = c;
        }
        let relus = cfg.channels.iter().map(|_| Relu::new()).collect();
        TapNet { convs, relus }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let min = 1usize << (self.convs.len() - 1);
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] < min || s[3] < min {
            return Err(Error::Dimension(format!(
                "feature network with {} taps needs [N, 3, H, W] with H, W >= {min}, got {s:?}",
                self.convs.len()
            )));
        }
        Ok(())
    }

    fn run(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        self.check(x)?;
        let mut taps = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for (i, (conv, relu)) in self.convs.iter_mut().zip(&mut self.relus).enumerate() {
            if i > 0 {
                h = avg_pool2(&h);
            }
            h = relu.forward(&conv.forward(&h, mode), mode);
            taps.push(h.clone());
        }
        Ok(taps)
    }
}

impl<T: Scalar> FeatureNetwork<T> for TapNet<T> {
    fn name(&self) -> &str {
        "tapnet"
    }

    fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check(x)?;
        let mut taps = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = avg_pool2(&h);
            }
            h = Relu::infer(&conv.infer(&h));
            taps.push(h.clone());
        }
        Ok(taps)
    }

    fn trace(&mut self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.run(x, Mode::Trace)
    }

    fn backward(&mut self, d_taps: &[Tensor<T>]) -> Result<Tensor<T>> {
        if d_taps.len() != self.convs.len() {
            return Err(Error::Arity(format!("{} tap gradients for {} taps", d_taps.len(), self.convs.len())));
        }
        let mut d: Option<Tensor<T>> = None;
        for i in (0..self.convs.len()).rev() {
            let mut g = d_taps[i].clone();
            if let Some(up) = d.take() {
                g.add_assign(&up);
            }
            let g = self.relus[i].backward(&g);
            let g = self.convs[i].backward(&g, false, true).expect("input gradient requested");
            d = Some(if i > 0 { avg_pool2_backward(&g) } else { g });
        }
        Ok(d.expect("at least one tap"))
    }
}

/// Image to 40 attribute probabilities.
pub trait AttributeClassifier<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// `[N, 3, H, W] -> [N, 40]` with entries in `[0, 1]`.
    fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn trace(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn backward(&mut self, d_probs: &Tensor<T>) -> Result<Tensor<T>>;
}

pub fn classify_image<T: Scalar>(a: &dyn AttributeClassifier<T>, x: &FaceImage<T>) -> Result<AttributeVector<T>> {
    AttributeVector::new(a.classify(&x.to_batch())?.into_data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeNetConfig {
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for AttributeNetConfig {
    fn default() -> Self {
        AttributeNetConfig {
            channels: vec![8, 16, 16],
            seed: 11,
        }
    }
}

/// Fixed random classifier: stride-2 conv + ReLU stack, global pool, linear, sigmoid.
pub struct RandomAttributeNet<T> {
    convs: Vec<Conv2d<T>>,
    relus: Vec<Relu<T>>,
    head: Linear<T>,
    pooled_hw: (usize, usize),
    probs: Option<Tensor<T>>,
}

impl<T: Scalar> RandomAttributeNet<T> {
    pub fn new(cfg: &AttributeNetConfig) -> Self {
        let mut rng = seeded_rng(cfg.seed);
        let mut cin = 3;
        let mut convs = Vec::new();
        for &c in &cfg.channels {
            convs.push(Conv2d::new(cin, c, 3, 2, 1, 1.0, &mut rng));
            cin = c;
        }
        RandomAttributeNet {
            relus: convs.iter().map(|_| Relu::new()).collect(),
            convs,
            head: Linear::new(cin, ATTRIBUTE_COUNT, 4.0, &mut rng),
            pooled_hw: (0, 0),
            probs: None,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Dimension(format!("attribute classifier expects [N, 3, H, W], got {s:?}")));
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> AttributeClassifier<T> for RandomAttributeNet<T> {
    fn name(&self) -> &str {
        "random-attributes"
    }

    fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut h = x.clone();
        for c in &self.convs {
            h = Relu::infer(&c.infer(&h));
        }
        Ok(self.head.infer(&global_avg_pool(&h)).map(sigmoid))
    }

    fn trace(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut h = x.clone();
        for (c, r) in self.convs.iter_mut().zip(&mut self.relus) {
            h = r.forward(&c.forward(&h, Mode::Trace), Mode::Trace);
        }
        let (_, _, ph, pw) = h.dims4();
        self.pooled_hw = (ph, pw);
        let p = self.head.forward(&global_avg_pool(&h), Mode::Trace).map(sigmoid);
        self.probs = Some(p.clone());
        Ok(p)
    }

    fn backward(&mut self, d_probs: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self
            .probs
            .take()
            .ok_or_else(|| Error::State("attribute backward without a trace".into()))?;
        let dz = d_probs.zip_map(&p, |d, p| d * p * (T::one() - p));
        let dp = self.head.backward(&dz, false);
        let mut d = global_avg_pool_backward(&dp, self.pooled_hw.0, self.pooled_hw.1);
        for (c, r) in self.convs.iter_mut().zip(&mut self.relus).rev() {
            d = c.backward(&r.backward(&d), false, true).expect("input gradient requested");
        }
        Ok(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_tmp: f64,
    pub w_pix: f64,
    pub w_per: f64,
    pub w_att: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_tmp: 1.0,
            w_pix: 1.0,
            w_per: 1.0,
            w_att: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_tmp, self.w_pix, self.w_per, self.w_att];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Range(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Range("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::Range(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }
}

/// Which generator an objective belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorRole {
    Layer(Component),
    Panorama,
}

/// Individual loss values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub template: Option<f64>,
    pub pixel: Option<f64>,
    pub perceptual: Option<f64>,
    pub attribute: Option<f64>,
}

/// Terms an objective uses: layer generators never see the attribute loss,
/// in any stage; the panorama generator always does.
fn uses_attribute(stage: Stage, role: GeneratorRole) -> Result<bool> {
    match (stage, role) {
        (Stage::One, GeneratorRole::Panorama) => {
            Err(Error::StageOrder("the panorama generator has no stage-1 objective".into()))
        }
        (Stage::Two, GeneratorRole::Layer(_)) => {
            Err(Error::StageOrder("layer generators are frozen in stage 2".into()))
        }
        (_, GeneratorRole::Layer(_)) => Ok(false),
        (_, GeneratorRole::Panorama) => Ok(true),
    }
}

/// Weighted sum of the parts the stage/role combination prescribes; a
/// prescribed part with positive weight that is absent is an arity error.
pub fn stage_objective(stage: Stage, role: GeneratorRole, w: &LossWeights, parts: &LossParts) -> Result<f64> {
    let att = uses_attribute(stage, role)?;
    let mut total = 0.0;
    let mut add = |name: &str, weight: f64, v: Option<f64>| -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        let v = v.ok_or_else(|| Error::Arity(format!("objective requires the {name} loss")))?;
        total += weight * v;
        Ok(())
    };
    add("template", w.w_tmp, parts.template)?;
    add("pixel", w.w_pix, parts.pixel)?;
    add("perceptual", w.w_per, parts.perceptual)?;
    if att {
        add("attribute", w.w_att, parts.attribute)?;
    }
    Ok(total)
}

/// The frozen networks an objective is evaluated through.
pub struct LossNetworks<'a, T: Scalar> {
    pub extractor: &'a mut dyn TemplateExtractor<T>,
    pub features: &'a mut dyn FeatureNetwork<T>,
    pub attributes: &'a mut dyn AttributeClassifier<T>,
    pub normalize_templates: bool,
}

/// Supervision for one batch of generator outputs.
pub struct Targets<'a, T> {
    /// `[N, 3, H, W]`: masked layer targets (stage 1) or full panoramas.
    pub images: &'a Tensor<T>,
    /// `[N, d]`.
    pub templates: &'a Tensor<T>,
    /// Whether the template term applies (the stage-1 switch).
    pub use_template: bool,
}

/// Evaluates an objective on a batch of generator outputs and returns the
/// value, its parts, and the gradient w.r.t. the outputs.
pub fn objective_with_grad<T: Scalar>(
    nets: &mut LossNetworks<'_, T>,
    stage: Stage,
    role: GeneratorRole,
    w: &LossWeights,
    output: &Tensor<T>,
    targets: &Targets<'_, T>,
) -> Result<(f64, LossParts, Tensor<T>)> {
    same_shape(output, targets.images, "objective")?;
    let att = uses_attribute(stage, role)?;
    let mut parts = LossParts::default();
    let mut grad = Tensor::zeros(output.shape());

    if w.w_pix > 0.0 {
        parts.pixel = Some(mse(output.data(), targets.images.data()).as_f64());
        grad.add_assign(&mse_grad(output, targets.images, T::lit(w.w_pix)));
    }

    if w.w_per > 0.0 {
        let want = nets.features.features(targets.images)?;
        let got = nets.features.trace(output)?;
        let mut total = 0.0;
        let d_taps: Vec<Tensor<T>> = got
            .iter()
            .zip(&want)
            .map(|(g, t)| {
                total += mse(g.data(), t.data()).as_f64();
                // per-sample normalisation by H_l·W_l·C_l, then a batch mean
                mse_grad(g, t, T::lit(w.w_per))
            })
            .collect();
        parts.perceptual = Some(total);
        grad.add_assign(&nets.features.backward(&d_taps)?);
    }

    if w.w_tmp > 0.0 && targets.use_template {
        let name = nets.extractor.descriptor().name.clone();
        let tier = nets
            .extractor
            .differentiable()
            .ok_or_else(|| Error::Capability(format!("extractor `{name}` cannot be trained through")))?;
        let t_hat_raw = tier.forward_traced(output)?;
        same_shape(&t_hat_raw, targets.templates, "template loss")?;
        let (t_hat, norms) = if nets.normalize_templates {
            let (y, n) = l2_normalize_rows(&t_hat_raw);
            (y, Some(n))
        } else {
            (t_hat_raw, None)
        };
        let t = if nets.normalize_templates {
            l2_normalize_rows(targets.templates).0
        } else {
            targets.templates.clone()
        };
        parts.template = Some(mse(t_hat.data(), t.data()).as_f64());
        let mut dt = mse_grad(&t_hat, &t, T::lit(w.w_tmp));
        if let Some(n) = norms {
            dt = l2_normalize_rows_backward(&t_hat, &n, &dt);
        }
        grad.add_assign(&tier.backward_input(&dt)?);
    }

    if att && w.w_att > 0.0 {
        let want = nets.attributes.classify(targets.images)?;
        let got = nets.attributes.trace(output)?;
        parts.attribute = Some(mae(got.data(), want.data()).as_f64());
        let k = T::lit(w.w_att) / T::from_usize(got.len()).unwrap();
        let d = got.zip_map(&want, |g, t| {
            if g > t {
                k
            } else if g < t {
                -k
            } else {
                T::zero()
            }
        });
        grad.add_assign(&nets.attributes.backward(&d)?);
    }

    let effective = LossWeights {
        w_tmp: if targets.use_template { w.w_tmp } else { 0.0 },
        ..*w
    };
    let total = stage_objective(stage, role, &effective, &parts)?;
    Ok((total, parts, grad))
}
