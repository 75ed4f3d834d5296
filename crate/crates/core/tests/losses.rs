mod common;

use lbfti::domain::{AttributeVector, Component, FaceImage, FacialTemplate};
use lbfti::extractor::{ToyExtractor, ToyExtractorArch};
use lbfti::losses::*;
use lbfti::nn::seeded_rng;
use lbfti::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn random_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_image(rng: &mut impl Rng, side: usize) -> FaceImage<f64> {
    FaceImage::new(Tensor::from_vec(&[3, side, side], random_vec(rng, 3 * side * side, -1.0, 1.0)).unwrap()).unwrap()
}

fn loop_mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s / a.len() as f64
}

#[test]
fn losses_match_loop_oracles() {
    let mut rng = seeded_rng(1);
    for case in 0..100 {
        let d = 8 + case % 24;
        let t = FacialTemplate::new(random_vec(&mut rng, d, -1.0, 1.0)).unwrap();
        let u = FacialTemplate::new(random_vec(&mut rng, d, -1.0, 1.0)).unwrap();
        let got = template_loss(&t, &u).unwrap();
        assert!((got - loop_mse(t.values(), u.values())).abs() <= 1e-12);

        let side = if case % 2 == 0 { 32 } else { 64 };
        let x = random_image(&mut rng, side);
        let y = random_image(&mut rng, side);
        let mut s = 0.0;
        for c in 0..3 {
            for i in 0..side {
                for j in 0..side {
                    let e = x.get(c, i, j) - y.get(c, i, j);
                    s += e * e;
                }
            }
        }
        assert!((pixel_loss(&x, &y).unwrap() - s / (3 * side * side) as f64).abs() <= 1e-12);
        let per = perceptual_loss(&x, &y, &ScaledIdentityTaps::identity()).unwrap();
        assert!((per - pixel_loss(&x, &y).unwrap()).abs() <= 1e-9);

        let a = AttributeVector::new(random_vec(&mut rng, 40, 0.0, 1.0)).unwrap();
        let b = AttributeVector::new(random_vec(&mut rng, 40, 0.0, 1.0)).unwrap();
        let mut m = 0.0;
        for i in 0..40 {
            m += (a.probs()[i] - b.probs()[i]).abs();
        }
        assert!((attribute_loss(&a, &b).unwrap() - m / 40.0).abs() <= 1e-12);
    }
}

#[test]
fn perceptual_loss_matches_per_tap_loop() {
    let net = TapNet::<f64>::new(&TapNetConfig {
        channels: vec![3, 5, 4],
        seed: 2,
    });
    let mut rng = seeded_rng(2);
    let x = random_image(&mut rng, 32);
    let y = random_image(&mut rng, 32);
    let fx = net.features(&x.to_batch()).unwrap();
    let fy = net.features(&y.to_batch()).unwrap();
    assert_eq!(fx.len(), 3);
    let mut want = 0.0;
    for (a, b) in fx.iter().zip(&fy) {
        want += loop_mse(a.data(), b.data());
    }
    assert!((perceptual_loss(&x, &y, &net).unwrap() - want).abs() <= 1e-12);
}

#[test]
fn mismatched_shapes_are_errors() {
    let a = FacialTemplate::new(vec![1.0f64; 8]).unwrap();
    let b = FacialTemplate::new(vec![1.0f64; 9]).unwrap();
    assert!(template_loss(&a, &b).is_err());
    let mut rng = seeded_rng(3);
    assert!(pixel_loss(&random_image(&mut rng, 32), &random_image(&mut rng, 64)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_loss_is_a_symmetric_nonnegative_discrepancy(seed in any::<u64>(), big in any::<bool>()) {
        let mut rng = seeded_rng(seed);
        let side = if big { 64 } else { 32 };
        let x = random_image(&mut rng, side);
        let y = random_image(&mut rng, side);
        let xy = pixel_loss(&x, &y).unwrap();
        prop_assert!(xy >= 0.0);
        prop_assert_eq!(xy, pixel_loss(&y, &x).unwrap());
        prop_assert_eq!(pixel_loss(&x, &x).unwrap(), 0.0);
        prop_assert!(xy > 0.0);
    }

    #[test]
    fn template_and_attribute_losses_are_symmetric_and_vanish_on_equality(
        t in prop::collection::vec(-1.0f64..1.0, 8..40),
        shift in 1e-3f64..1.0,
    ) {
        let a = FacialTemplate::new(t.clone()).unwrap();
        let b = FacialTemplate::new(t.iter().map(|v| v + shift).collect()).unwrap();
        prop_assert_eq!(template_loss(&a, &a).unwrap(), 0.0);
        prop_assert!(template_loss(&a, &b).unwrap() > 0.0);
        prop_assert_eq!(template_loss(&a, &b).unwrap(), template_loss(&b, &a).unwrap());

        let p: Vec<f64> = (0..40).map(|i| (t[i % t.len()] + 1.0) / 2.0).collect();
        let q: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let pa = AttributeVector::new(p).unwrap();
        let qa = AttributeVector::new(q).unwrap();
        prop_assert_eq!(attribute_loss(&pa, &pa).unwrap(), 0.0);
        prop_assert!(attribute_loss(&pa, &qa).unwrap() >= 0.0);
        prop_assert_eq!(attribute_loss(&pa, &qa).unwrap(), attribute_loss(&qa, &pa).unwrap());
    }

    #[test]
    fn scaled_taps_scale_the_pixel_loss(seed in any::<u64>(), scales in prop::collection::vec(0.1f64..3.0, 1..4)) {
        let mut rng = seeded_rng(seed);
        let x = random_image(&mut rng, 32);
        let y = random_image(&mut rng, 32);
        let k: f64 = scales.iter().map(|s| s * s).sum();
        let got = perceptual_loss(&x, &y, &ScaledIdentityTaps::new(scales)).unwrap();
        prop_assert!((got - k * pixel_loss(&x, &y).unwrap()).abs() <= 1e-9);
    }
}

/// Critics sized for 8×8 inputs.
struct SmallNets {
    extractor: ToyExtractor<f64>,
    features: TapNet<f64>,
    attributes: RandomAttributeNet<f64>,
}

impl SmallNets {
    fn new() -> Self {
        SmallNets {
            extractor: ToyExtractor::new("fd", ToyExtractorArch { d: 16, channels: vec![4, 6] }, 4).unwrap(),
            features: TapNet::new(&TapNetConfig { channels: vec![4, 4, 4], seed: 6 }),
            attributes: RandomAttributeNet::new(&AttributeNetConfig { channels: vec![4, 4], seed: 8 }),
        }
    }

    fn nets(&mut self, normalize_templates: bool) -> LossNetworks<'_, f64> {
        LossNetworks {
            extractor: &mut self.extractor,
            features: &mut self.features,
            attributes: &mut self.attributes,
            normalize_templates,
        }
    }
}

/// ‖analytic − central FD‖ / max(‖analytic‖, ‖FD‖) for one objective.
fn fd_relative_error(stage: Stage, role: GeneratorRole, use_template: bool, normalize: bool, seed: u64) -> f64 {
    let mut nets = SmallNets::new();
    let mut rng = seeded_rng(seed);
    let (n, side) = (2, 8);
    let len = n * 3 * side * side;
    let out = Tensor::from_vec(&[n, 3, side, side], random_vec(&mut rng, len, -0.9, 0.9)).unwrap();
    let target = Tensor::from_vec(&[n, 3, side, side], random_vec(&mut rng, len, -0.9, 0.9)).unwrap();
    let templates = Tensor::from_vec(&[n, 16], random_vec(&mut rng, n * 16, -1.0, 1.0)).unwrap();
    let w = LossWeights { w_tmp: 3.0, w_pix: 1.0, w_per: 0.5, w_att: 2.0 };
    let targets = Targets { images: &target, templates: &templates, use_template };
    let (_, _, grad) = objective_with_grad(&mut nets.nets(normalize), stage, role, &w, &out, &targets).unwrap();

    let h = 1e-3;
    let mut num = 0.0;
    let (mut na, mut nf) = (0.0, 0.0);
    for i in 0..len {
        let mut p = out.clone();
        p.data_mut()[i] += h;
        let mut m = out.clone();
        m.data_mut()[i] -= h;
        let fp = objective_with_grad(&mut nets.nets(normalize), stage, role, &w, &p, &targets).unwrap().0;
        let fm = objective_with_grad(&mut nets.nets(normalize), stage, role, &w, &m, &targets).unwrap().0;
        let fd = (fp - fm) / (2.0 * h);
        let a = grad.data()[i];
        num += (a - fd) * (a - fd);
        na += a * a;
        nf += fd * fd;
    }
    num.sqrt() / na.sqrt().max(nf.sqrt())
}

#[test]
fn stage_objective_gradients_match_finite_differences() {
    let cases = [
        (Stage::One, GeneratorRole::Layer(Component::Eyes), true, true),
        (Stage::One, GeneratorRole::Layer(Component::Skin), false, true),
        (Stage::One, GeneratorRole::Layer(Component::Mouth), true, false),
        (Stage::Two, GeneratorRole::Panorama, true, true),
        (Stage::Three, GeneratorRole::Layer(Component::Nose), true, true),
        (Stage::Three, GeneratorRole::Panorama, true, true),
    ];
    for (k, (stage, role, use_template, normalize)) in cases.into_iter().enumerate() {
        let err = fd_relative_error(stage, role, use_template, normalize, 100 + k as u64);
        assert!(err <= 1e-3, "{stage:?} {role:?}: relative error {err:e}");
    }
}

#[test]
fn objective_parts_follow_the_stage_and_role() {
    let mut nets = SmallNets::new();
    let mut rng = seeded_rng(5);
    let out = Tensor::from_vec(&[2, 3, 8, 8], random_vec(&mut rng, 384, -0.5, 0.5)).unwrap();
    let target = Tensor::from_vec(&[2, 3, 8, 8], random_vec(&mut rng, 384, -0.5, 0.5)).unwrap();
    let templates = Tensor::from_vec(&[2, 16], random_vec(&mut rng, 32, -1.0, 1.0)).unwrap();
    let w = LossWeights::default();
    let targets = Targets { images: &target, templates: &templates, use_template: true };
    let layer = GeneratorRole::Layer(Component::Eyebrows);
    let (_, parts, _) = objective_with_grad(&mut nets.nets(true), Stage::One, layer, &w, &out, &targets).unwrap();
    assert!(parts.template.is_some() && parts.pixel.is_some() && parts.perceptual.is_some());
    assert!(parts.attribute.is_none());
    let (total, parts, _) =
        objective_with_grad(&mut nets.nets(true), Stage::Three, GeneratorRole::Panorama, &w, &out, &targets).unwrap();
    assert!(parts.attribute.is_some());
    let sum = parts.template.unwrap() + parts.pixel.unwrap() + parts.perceptual.unwrap() + parts.attribute.unwrap();
    assert!((total - sum).abs() < 1e-12);
    assert!(objective_with_grad(&mut nets.nets(true), Stage::One, GeneratorRole::Panorama, &w, &out, &targets).is_err());
}
