mod common;

use std::collections::BTreeMap;

use common::{tiny_arch, D, SIDE};
use lbfti::domain::{Component, FaceImage, FacialTemplate};
use lbfti::generators::*;
use lbfti::losses::Stage;
use lbfti::nn::{checksum_state, seeded_rng, Module};
use lbfti::{Error, Tensor};
use rand_distr::{Distribution, Normal, Uniform};

fn gaussian(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    let nd = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| nd.sample(&mut rng)).collect()).unwrap()
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    let u = Uniform::new(-1.0, 1.0).unwrap();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| u.sample(&mut rng)).collect()).unwrap()
}

#[test]
fn resolution_doubles_from_4_to_128_in_five_steps_both_ways() {
    let arch = GeneratorArch::toy(64, 128);
    assert_eq!(arch.doublings().unwrap(), 5);
    let mut rng = seeded_rng(0);
    let t = gaussian(&[1, 64], 1.0, 1);
    let layer = LayerGenerator::<f64>::new(Component::Eyes, &arch, &mut rng).unwrap();
    assert_eq!(layer.trajectory(&t).unwrap(), vec![4, 8, 16, 32, 64, 128]);

    let pano = PanoramaGenerator::<f64>::new(&arch, &mut rng).unwrap();
    assert_eq!(pano.encoder_input_channels(), 15);
    assert_eq!(PANORAMA_INPUT_CHANNELS, 15);
    let layers = uniform(&[1, 15, 128, 128], 2);
    assert_eq!(pano.encoder_trajectory(&layers), vec![128, 64, 32, 16, 8, 4]);
    assert_eq!(pano.decoder_trajectory(&layers, &t).unwrap(), vec![4, 8, 16, 32, 64, 128]);
    let y = pano.infer(&layers, &t, PanoInputs::default()).unwrap();
    assert_eq!(y.shape(), &[1, 3, 128, 128]);
}

#[test]
fn panorama_outweighs_a_foreground_plus_the_midground_generator() {
    for arch in [GeneratorArch::toy(512, 128), GeneratorArch::reference(512, 128)] {
        let set = GeneratorSet::<f32>::full(arch, 0).unwrap();
        let fg = set.layers[&Component::Eyes].num_params();
        let mg = set.layers[&Component::Skin].num_params();
        let pano = set.panorama().unwrap().num_params();
        assert!(pano > fg + mg, "panorama {pano} vs foreground {fg} + midground {mg}");
    }
}

#[test]
fn outputs_stay_in_tanh_range_on_1000_random_inputs() {
    let set = GeneratorSet::<f64>::full(tiny_arch(), 3).unwrap();
    for chunk in 0..10u64 {
        // wide templates push pre-activations far into saturation
        let t = gaussian(&[100, D], 25.0, 10 + chunk);
        let y = set.reconstruct(&t).unwrap();
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for l in set.layer_outputs(&t).unwrap().values() {
            assert!(l.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let layers = gaussian(&[100, 15, SIDE, SIDE], 10.0, 50 + chunk);
        let y = set.panorama().unwrap().infer(&layers, &t, PanoInputs::default()).unwrap();
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn zeroed_residual_convs_leave_a_doubled_skip() {
    let mut rng = seeded_rng(4);
    let mut pano = PanoramaGenerator::<f64>::new(&tiny_arch(), &mut rng).unwrap();
    let block = &mut pano.decoder_blocks_mut()[1];
    block.zero_residual_convs();
    let x = gaussian(&[2, 8, 8, 8], 1.0, 5);
    let d = block.skip_input(&x);
    let y = block.infer(&x);
    assert_eq!(y.shape(), d.shape());
    for (a, b) in y.data().iter().zip(d.data()) {
        assert!((a - 2.0 * b.max(0.0)).abs() < 1e-12);
    }
}

#[test]
fn disabled_template_injection_ignores_the_template() {
    let mut rng = seeded_rng(6);
    let pano = PanoramaGenerator::<f64>::new(&tiny_arch(), &mut rng).unwrap();
    let layers = uniform(&[3, 15, SIDE, SIDE], 7);
    let off = PanoInputs {
        inject_template: false,
        use_encoder: true,
    };
    let a = pano.infer(&layers, &gaussian(&[3, D], 1.0, 8), off).unwrap();
    let b = pano.infer(&layers, &gaussian(&[3, D], 1.0, 9), off).unwrap();
    assert_eq!(a.max_abs_diff(&b), 0.0);
    let c = pano.infer(&layers, &gaussian(&[3, D], 1.0, 9), PanoInputs::default()).unwrap();
    assert!(a.max_abs_diff(&c) > 0.0);
}

#[test]
fn generator_streams_are_independent() {
    let full = GeneratorSet::<f64>::full(tiny_arch(), 11).unwrap();
    let some = GeneratorSet::<f64>::new(tiny_arch(), &[Component::Nose], false, 11).unwrap();
    assert_eq!(
        some.checksum_layer(Component::Nose).unwrap(),
        full.checksum_layer(Component::Nose).unwrap()
    );
    assert_ne!(
        full.checksum_layer(Component::Nose).unwrap(),
        full.checksum_layer(Component::Eyes).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_and_dimension_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.tar");
    let mut set = GeneratorSet::<f64>::full(tiny_arch(), 12).unwrap();
    set.pano_inputs.inject_template = false;
    set.save(&path, Stage::Two).unwrap();
    let (back, stage) = GeneratorSet::<f64>::load(&path, Some(D)).unwrap();
    assert_eq!(stage, Stage::Two);
    assert_eq!(back.names(), set.names());
    assert_eq!(back.pano_inputs, set.pano_inputs);
    let t = gaussian(&[2, D], 1.0, 13);
    assert_eq!(back.reconstruct(&t).unwrap(), set.reconstruct(&t).unwrap());
    for c in Component::ALL {
        assert_eq!(back.checksum_layer(c).unwrap(), set.checksum_layer(c).unwrap());
    }
    assert!(matches!(GeneratorSet::<f64>::load(&path, Some(D + 1)), Err(Error::Dimension(_))));

    // a set without a panorama generator reloads as one
    let mut partial = set.try_clone().unwrap();
    partial.retain(&[Component::Eyes, Component::Mouth], false);
    partial.save(&path, Stage::One).unwrap();
    let (back, _) = GeneratorSet::<f64>::load(&path, None).unwrap();
    assert!(back.panorama.is_none());
    assert_eq!(back.names(), vec!["fg_eyes".to_string(), "fg_mouth".to_string()]);

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(GeneratorSet::<f64>::load(&path, None).is_err());
}

#[test]
fn wrong_template_dimension_is_rejected() {
    let set = GeneratorSet::<f64>::full(tiny_arch(), 14).unwrap();
    assert!(matches!(set.reconstruct(&gaussian(&[1, D + 3], 1.0, 1)), Err(Error::Dimension(_))));
    let t = FacialTemplate::new(vec![0.1; D - 1]).unwrap();
    assert!(set.reconstruct_one(&t).is_err());
}

#[test]
fn superposition_without_panorama() {
    let mut set = GeneratorSet::<f64>::full(tiny_arch(), 15).unwrap();
    set.retain(&Component::ALL, false);
    let t = gaussian(&[2, D], 1.0, 16);
    let layers = set.layer_outputs(&t).unwrap();
    let want = superpose_layers(&layers).unwrap();
    assert_eq!(set.reconstruct(&t).unwrap(), want);
    set.retain(&[], false);
    assert!(matches!(set.reconstruct(&t), Err(Error::State(_))));
}

#[test]
fn frozen_layers_survive_training_steps() {
    let mut set = GeneratorSet::<f64>::full(tiny_arch(), 17).unwrap();
    let g = set.layers.get_mut(&Component::Skin).unwrap();
    g.set_trainable(false);
    let before = checksum_state(&*g);
    let mut opt = lbfti::nn::Adam::new(1e-2, Default::default());
    for k in 0..3 {
        let y = g.forward(&gaussian(&[4, D], 1.0, 20 + k), lbfti::nn::Mode::Train).unwrap();
        g.backward(&y);
        g.apply_update(&mut opt);
    }
    assert_eq!(checksum_state(&*g), before);
}

#[test]
fn single_image_helpers_agree_with_batches() {
    let mut rng = seeded_rng(18);
    let g = LayerGenerator::<f64>::new(Component::Mouth, &tiny_arch(), &mut rng).unwrap();
    let t = gaussian(&[1, D], 1.0, 19);
    let one = generate_layer(&g, &FacialTemplate::new(t.data().to_vec()).unwrap()).unwrap();
    assert_eq!(one, FaceImage::from_batch(&g.infer(&t).unwrap(), 0).unwrap());

    let pano = PanoramaGenerator::<f64>::new(&tiny_arch(), &mut rng).unwrap();
    let imgs: Vec<FaceImage<f64>> = (0..5)
        .map(|k| FaceImage::from_batch(&uniform(&[1, 3, SIDE, SIDE], 30 + k), 0).unwrap())
        .collect();
    let tmpl = FacialTemplate::new(t.data().to_vec()).unwrap();
    let got = generate_panorama(&pano, &imgs, &tmpl, true).unwrap();
    let map: BTreeMap<Component, Tensor<f64>> =
        Component::ALL.iter().zip(&imgs).map(|(c, i)| (*c, i.to_batch())).collect();
    let want = pano.infer(&stack_layers(&map).unwrap(), &t, PanoInputs::default()).unwrap();
    assert_eq!(got, FaceImage::from_batch(&want, 0).unwrap());
}
