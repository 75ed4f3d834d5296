//! Core data types: face images, templates, component masks and layer bundles.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Facial component with its own generator and supervision layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Eyebrows,
    Eyes,
    Nose,
    Mouth,
    Skin,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Eyebrows,
        Component::Eyes,
        Component::Nose,
        Component::Mouth,
        Component::Skin,
    ];

    pub const FOREGROUND: [Component; 4] = [
        Component::Eyebrows,
        Component::Eyes,
        Component::Nose,
        Component::Mouth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Eyebrows => "eyebrows",
            Component::Eyes => "eyes",
            Component::Nose => "nose",
            Component::Mouth => "mouth",
            Component::Skin => "skin",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_foreground(self) -> bool {
        self != Component::Skin
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Square RGB image with values in `[-1, 1]`, stored channel-first as `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage<T> {
    pixels: Tensor<T>,
}

fn check_side(h: usize, w: usize) -> Result<()> {
    if h != w || h < 32 || !h.is_power_of_two() {
        return Err(Error::Dimension(format!(
            "face images must be square with a power-of-two side >= 32, got {h}x{w}"
        )));
    }
    Ok(())
}

fn check_range<T: Scalar>(data: &[T]) -> Result<()> {
    let one = T::one();
    if let Some((i, v)) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v >= -one && **v <= one))
    {
        return Err(Error::Range(format!("pixel {i} = {v} outside [-1, 1]")));
    }
    Ok(())
}

impl<T: Scalar> FaceImage<T> {
    /// Wraps a `[3, H, W]` tensor, checking shape and range.
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Dimension(format!("expected [3, H, W], got {s:?}")));
        }
        check_side(s[1], s[2])?;
        check_range(pixels.data())?;
        Ok(FaceImage { pixels })
    }

    pub fn zeros(side: usize) -> Result<Self> {
        check_side(side, side)?;
        Ok(FaceImage {
            pixels: Tensor::zeros(&[3, side, side]),
        })
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn data(&self) -> &[T] {
        self.pixels.data()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        let s = self.side();
        self.pixels.data()[(c * s + y) * s + x]
    }

    /// As a batch of one: `[1, 3, H, W]`.
    pub fn to_batch(&self) -> Tensor<T> {
        let s = self.side();
        Tensor::from_vec(&[1, 3, s, s], self.pixels.data().to_vec()).unwrap()
    }

    /// Batch entry `i` of an NCHW tensor, clamped into `[-1, 1]`.
    pub fn from_batch(batch: &Tensor<T>, i: usize) -> Result<Self> {
        let (_, c, h, w) = batch.dims4();
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        let data = batch
            .sample(i)
            .iter()
            .map(|v| v.max(-T::one()).min(T::one()))
            .collect();
        Self::new(Tensor::from_vec(&[3, h, w], data)?)
    }

    pub fn cast<U: Scalar>(&self) -> FaceImage<U> {
        FaceImage {
            pixels: self.pixels.cast(),
        }
    }
}

/// Builds a [`FaceImage`] from an `(H, W, 3)` channel-last tensor.
pub fn validate_face_image<T: Scalar>(pixels: &Tensor<T>) -> Result<FaceImage<T>> {
    let s = pixels.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Dimension(format!("expected (H, W, 3), got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    check_side(h, w)?;
    check_range(pixels.data())?;
    let src = pixels.data();
    let mut chw = vec![T::zero(); h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                chw[(c * h + y) * w + x] = src[(y * w + x) * 3 + c];
            }
        }
    }
    FaceImage::new(Tensor::from_vec(&[3, h, w], chw)?)
}

/// Identity embedding produced by a template extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FacialTemplate<T> {
    values: Vec<T>,
}

impl<T: Scalar> FacialTemplate<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("template must have d >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("template entry {i} is not finite")));
        }
        Ok(FacialTemplate { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n <= T::zero() {
            return Err(Error::Numeric("cannot normalize a zero template".into()));
        }
        Ok(FacialTemplate {
            values: self.values.iter().map(|v| *v / n).collect(),
        })
    }
}

/// Binary region for one facial component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentMask {
    pub component: Component,
    height: usize,
    width: usize,
    bits: Vec<bool>,
    failed: bool,
}

impl ComponentMask {
    /// A detected region; must contain at least one set bit.
    pub fn new(component: Component, height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask of {} bits does not match {height}x{width}",
                bits.len()
            )));
        }
        if !bits.iter().any(|b| *b) {
            return Err(Error::Data(format!(
                "{component} mask is empty; use ComponentMask::failure for missed detections"
            )));
        }
        Ok(ComponentMask {
            component,
            height,
            width,
            bits,
            failed: false,
        })
    }

    /// All-false mask tagged as a detection failure.
    pub fn failure(component: Component, height: usize, width: usize) -> Self {
        ComponentMask {
            component,
            height,
            width,
            bits: vec![false; height * width],
            failed: true,
        }
    }

    /// Builds from bits, tagging an empty region as a failure.
    pub fn from_bits(component: Component, height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.iter().any(|b| *b) {
            Self::new(component, height, width, bits)
        } else if bits.len() == height * width {
            Ok(Self::failure(component, height, width))
        } else {
            Err(Error::Dimension("mask size mismatch".into()))
        }
    }

    pub fn full(component: Component, height: usize, width: usize) -> Self {
        ComponentMask {
            component,
            height,
            width,
            bits: vec![true; height * width],
            failed: false,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_failure(&self) -> bool {
        self.failed
    }

    pub fn intersects(&self, other: &ComponentMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }
}

/// Zeroes every pixel outside `mask`.
pub fn apply_mask<T: Scalar>(image: &FaceImage<T>, mask: &ComponentMask) -> Result<FaceImage<T>> {
    let s = image.side();
    if mask.height != s || mask.width != s {
        return Err(Error::Dimension(format!(
            "image is {s}x{s} but mask is {}x{}",
            mask.height, mask.width
        )));
    }
    let mut px = image.pixels.clone();
    let plane = s * s;
    for c in 0..3 {
        for (v, keep) in px.data_mut()[c * plane..(c + 1) * plane].iter_mut().zip(&mask.bits) {
            if !keep {
                *v = T::zero();
            }
        }
    }
    Ok(FaceImage { pixels: px })
}

/// Per-component supervision targets for one face.
#[derive(Clone, Debug)]
pub struct LayerBundle<T> {
    layers: BTreeMap<Component, FaceImage<T>>,
    masks: BTreeMap<Component, ComponentMask>,
    panorama: FaceImage<T>,
}

impl<T: Scalar> LayerBundle<T> {
    /// Checks component coverage, shapes, zero backgrounds and skin disjointness.
    pub fn new(
        layers: BTreeMap<Component, FaceImage<T>>,
        masks: BTreeMap<Component, ComponentMask>,
        panorama: FaceImage<T>,
    ) -> Result<Self> {
        for c in Component::ALL {
            if !layers.contains_key(&c) || !masks.contains_key(&c) {
                return Err(Error::Arity(format!("bundle is missing component {c}")));
            }
        }
        if layers.len() != 5 || masks.len() != 5 {
            return Err(Error::Arity("bundle must hold exactly five components".into()));
        }
        let s = panorama.side();
        let plane = s * s;
        for c in Component::ALL {
            let (layer, mask) = (&layers[&c], &masks[&c]);
            if layer.side() != s || mask.height != s || mask.width != s {
                return Err(Error::Dimension(format!("{c} layer/mask size differs from panorama")));
            }
            for ch in 0..3 {
                let d = &layer.data()[ch * plane..(ch + 1) * plane];
                if d.iter().zip(&mask.bits).any(|(v, m)| !m && *v != T::zero()) {
                    return Err(Error::Range(format!("{c} layer has nonzero pixels outside its mask")));
                }
            }
        }
        let skin = &masks[&Component::Skin];
        for c in Component::FOREGROUND {
            if skin.intersects(&masks[&c]) {
                return Err(Error::Data(format!("skin mask overlaps {c}")));
            }
        }
        Ok(LayerBundle {
            layers,
            masks,
            panorama,
        })
    }

    pub fn layer(&self, c: Component) -> &FaceImage<T> {
        &self.layers[&c]
    }

    pub fn mask(&self, c: Component) -> &ComponentMask {
        &self.masks[&c]
    }

    pub fn masks(&self) -> &BTreeMap<Component, ComponentMask> {
        &self.masks
    }

    pub fn panorama(&self) -> &FaceImage<T> {
        &self.panorama
    }
}

pub const ATTRIBUTE_COUNT: usize = 40;

/// Attribute-classifier output: 40 probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVector<T> {
    probs: Vec<T>,
}

impl<T: Scalar> AttributeVector<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.len() != ATTRIBUTE_COUNT {
            return Err(Error::Dimension(format!(
                "attribute vector needs {ATTRIBUTE_COUNT} entries, got {}",
                probs.len()
            )));
        }
        if let Some(v) = probs.iter().find(|p| !(**p >= T::zero() && **p <= T::one())) {
            return Err(Error::Range(format!("attribute probability {v} outside [0, 1]")));
        }
        Ok(AttributeVector { probs })
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }
}

/// One subject and the dataset images that belong to it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub image_refs: Vec<String>,
}

impl SubjectRecord {
    pub fn new(subject_id: impl Into<String>, image_refs: Vec<String>) -> Result<Self> {
        let subject_id = subject_id.into();
        if image_refs.is_empty() {
            return Err(Error::Data(format!("subject {subject_id} has no images")));
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &image_refs {
            if !seen.insert(r) {
                return Err(Error::Data(format!("duplicate image {r} in subject {subject_id}")));
            }
        }
        Ok(SubjectRecord {
            subject_id,
            image_refs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image() -> FaceImage<f64> {
        // 32x32 with a recognisable top-left corner
        let mut px = Tensor::zeros(&[3, 32, 32]);
        for c in 0..3 {
            let p = c * 32 * 32;
            px.data_mut()[p] = 1.0;
            px.data_mut()[p + 1] = -1.0;
            px.data_mut()[p + 32] = 0.5;
        }
        FaceImage::new(px).unwrap()
    }

    #[test]
    fn validate_accepts_zeros_128() {
        let t = Tensor::<f32>::zeros(&[128, 128, 3]);
        let img = validate_face_image(&t).unwrap();
        assert_eq!(img.side(), 128);
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let mut t = Tensor::<f32>::zeros(&[32, 32, 3]);
        t.data_mut()[17] = 1.5;
        assert!(matches!(validate_face_image(&t), Err(Error::Range(_))));
    }

    #[test]
    fn validate_rejects_non_power_of_two() {
        let t = Tensor::<f32>::zeros(&[100, 100, 3]);
        assert!(matches!(validate_face_image(&t), Err(Error::Dimension(_))));
        let t = Tensor::<f32>::zeros(&[16, 16, 3]);
        assert!(matches!(validate_face_image(&t), Err(Error::Dimension(_))));
    }

    #[test]
    fn validate_transposes_channel_last() {
        let mut t = Tensor::<f64>::zeros(&[32, 32, 3]);
        t.data_mut()[(2 * 32 + 5) * 3 + 1] = 0.25;
        let img = validate_face_image(&t).unwrap();
        assert_eq!(img.get(1, 2, 5), 0.25);
    }

    #[test]
    fn mask_identity_and_annihilator() {
        let img = tiny_image();
        let full = ComponentMask::full(Component::Nose, 32, 32);
        assert_eq!(apply_mask(&img, &full).unwrap(), img);
        let none = ComponentMask::failure(Component::Nose, 32, 32);
        assert!(apply_mask(&img, &none).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mask_single_bit_selection() {
        let img = tiny_image();
        let mut bits = vec![false; 32 * 32];
        bits[0] = true;
        let m = ComponentMask::new(Component::Eyes, 32, 32, bits).unwrap();
        let out = apply_mask(&img, &m).unwrap();
        for c in 0..3 {
            assert_eq!(
                [out.get(c, 0, 0), out.get(c, 0, 1), out.get(c, 1, 0), out.get(c, 1, 1)],
                [1.0, 0.0, 0.0, 0.0]
            );
        }
    }

    #[test]
    fn mask_size_mismatch_is_dimension_error() {
        let img = tiny_image();
        let m = ComponentMask::full(Component::Eyes, 64, 64);
        assert!(matches!(apply_mask(&img, &m), Err(Error::Dimension(_))));
    }

    #[test]
    fn empty_detection_must_be_tagged() {
        assert!(ComponentMask::new(Component::Mouth, 2, 2, vec![false; 4]).is_err());
        let m = ComponentMask::from_bits(Component::Mouth, 2, 2, vec![false; 4]).unwrap();
        assert!(m.is_failure());
    }

    #[test]
    fn template_rejects_non_finite() {
        assert!(FacialTemplate::new(vec![0.0f32, f32::NAN]).is_err());
        let t = FacialTemplate::new(vec![3.0f64, 4.0]).unwrap();
        assert!((t.normalized().unwrap().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attribute_vector_contract() {
        assert!(AttributeVector::new(vec![0.5f32; 39]).is_err());
        assert!(AttributeVector::new(vec![1.1f32; 40]).is_err());
        assert!(AttributeVector::new(vec![0.0f32; 40]).is_ok());
    }

    #[test]
    fn subject_record_rules() {
        assert!(SubjectRecord::new("s", vec![]).is_err());
        assert!(SubjectRecord::new("s", vec!["a".into(), "a".into()]).is_err());
        assert!(SubjectRecord::new("s", vec!["a".into(), "b".into()]).is_ok());
    }

    #[test]
    fn bundle_rejects_missing_component() {
        let img = tiny_image();
        let mut layers = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for c in Component::FOREGROUND {
            layers.insert(c, FaceImage::zeros(32).unwrap());
            masks.insert(c, ComponentMask::failure(c, 32, 32));
        }
        assert!(matches!(LayerBundle::new(layers, masks, img), Err(Error::Arity(_))));
    }
}
