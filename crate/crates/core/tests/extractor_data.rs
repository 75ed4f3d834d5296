mod common;

use common::{tiny_extractor, tiny_extractor_arch, tiny_spec, D, SIDE};
use lbfti::data::*;
use lbfti::domain::{Component, FaceImage, FacialTemplate};
use lbfti::extractor::*;
use lbfti::masks::{generate_synthetic_face, JitterBounds, SyntheticFaceSpec};
use lbfti::nn::seeded_rng;
use lbfti::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #[test]
    fn similarity_is_symmetric_and_scale_invariant(
        a in prop::collection::vec(-1.0f64..1.0, 8),
        b in prop::collection::vec(-1.0f64..1.0, 8),
        alpha in 0.01f64..100.0,
        beta in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let ta = FacialTemplate::new(a.clone()).unwrap();
        let tb = FacialTemplate::new(b.clone()).unwrap();
        let s = similarity(&ta, &tb).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s, similarity(&tb, &ta).unwrap());
        let sa = FacialTemplate::new(a.iter().map(|v| v * alpha).collect()).unwrap();
        let sb = FacialTemplate::new(b.iter().map(|v| v * beta).collect()).unwrap();
        prop_assert!((similarity(&sa, &sb).unwrap() - s).abs() <= 1e-6);
    }

    #[test]
    fn synthetic_masks_are_disjoint_for_any_identity(identity in 0u64..1_000_000, draw in 0u64..8) {
        let spec = SyntheticFaceSpec::sample(identity, draw, &JitterBounds::default());
        let face = generate_synthetic_face::<f32>(&spec, 64).unwrap();
        let masks = face.bundle.masks();
        let skin = &masks[&Component::Skin];
        for c in Component::FOREGROUND {
            prop_assert!(!masks[&c].is_failure());
            prop_assert!(!masks[&c].intersects(skin));
        }
        prop_assert!(face.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

fn random_images(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    let len = n * 3 * SIDE * SIDE;
    Tensor::from_vec(&[n, 3, SIDE, SIDE], (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn templates_have_the_declared_dimension_and_unit_norm() {
    let e = tiny_extractor::<f64>(1);
    assert_eq!(e.descriptor().d, D);
    let t = e.extract_batch(&random_images(5, 2)).unwrap();
    assert_eq!(t.shape(), &[5, D]);
    for i in 0..5 {
        let n: f64 = t.sample(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    let wrapped = QueryOnly::new(tiny_extractor::<f64>(1));
    assert!(!wrapped.descriptor().differentiable);
    assert_eq!(wrapped.extract_batch(&random_images(5, 2)).unwrap(), t);
}

fn labelled_faces(subjects: usize, per: usize, first: u64) -> (Vec<FaceImage<f64>>, Vec<String>) {
    let spec = lbfti::data::SyntheticSpec {
        first_identity: first,
        ..tiny_spec(subjects, per, per)
    };
    let raw = spec.render::<f64>().unwrap();
    (raw.iter().map(|r| r.image.clone()).collect(), raw.iter().map(|r| r.subject_id.clone()).collect())
}

#[test]
fn extractor_training_is_deterministic() {
    let (images, subjects) = labelled_faces(12, 6, 500);
    let cfg = ExtractorTrainConfig {
        epochs: 12,
        batch_size: 16,
        seed: 3,
        ..Default::default()
    };
    let (a, hist) = train_toy_extractor("a", &images, &subjects, &tiny_extractor_arch(), &cfg).unwrap();
    let (b, _) = train_toy_extractor("a", &images, &subjects, &tiny_extractor_arch(), &cfg).unwrap();
    assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
    let dir = tempfile::tempdir().unwrap();
    a.save(&dir.path().join("a.tar")).unwrap();
    b.save(&dir.path().join("b.tar")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a.tar")).unwrap(),
        std::fs::read(dir.path().join("b.tar")).unwrap()
    );
    assert!(hist.last().unwrap() < hist.first().unwrap());

    let one = vec![subjects[0].clone(); images.len()];
    assert!(matches!(
        train_toy_extractor("x", &images, &one, &tiny_extractor_arch(), &cfg),
        Err(Error::Data(_))
    ));
}

#[test]
fn synthetic_manifest_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let raw = tiny_spec(3, 3, 2).render::<f32>().unwrap();
    let manifest = write_synthetic(&raw, dir.path()).unwrap();
    let recs = read_manifest(&manifest).unwrap();
    assert_eq!(recs.len(), 9);
    assert_eq!(recs.iter().filter(|r| r.split == Split::Test).count(), 3);
    let back = load_manifest_samples::<f32>(&manifest).unwrap();
    let ext = tiny_extractor::<f32>(4);
    let (train, test) = build_datasets(back, &ext).unwrap();
    assert_eq!((train.len(), test.len()), (6, 3));
    assert_eq!(train.resolution(), Some(SIDE));
    assert_eq!(train.template_dim(), Some(D));
    assert_eq!(test.subjects().len(), 3);

    // a missing sidecar is a data error
    std::fs::remove_file(mask_sidecar_path(&dir.path().join(&recs[0].image_path))).unwrap();
    assert!(matches!(load_manifest_samples::<f32>(&manifest), Err(Error::Data(_))));
    // a missing image is too
    std::fs::remove_file(dir.path().join(&recs[1].image_path)).unwrap();
    assert!(read_manifest(&manifest).is_err());
}

#[test]
fn rendering_is_reproducible_and_split_by_draw() {
    let a = tiny_spec(2, 4, 3).render::<f64>().unwrap();
    let b = tiny_spec(2, 4, 3).render::<f64>().unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.image, y.image);
    }
    assert_eq!(a.iter().filter(|r| r.split == Split::Train).count(), 6);
    assert!(a[3].id.ends_with("_03") && a[3].split == Split::Test);
    let bad = SyntheticSpec {
        train_per_subject: 5,
        ..tiny_spec(2, 4, 3)
    };
    assert!(matches!(bad.render::<f64>(), Err(Error::Config { .. })));
}

#[test]
fn retemplating_swaps_every_template() {
    let (mut train, _) = common::tiny_data::<f64>(2, 2, 2);
    let before: Vec<_> = train.samples.iter().map(|s| s.template.clone()).collect();
    train.retemplate(&tiny_extractor::<f64>(77)).unwrap();
    assert!(train.samples.iter().zip(&before).all(|(s, t)| &s.template != t));
    let idx = [0, 1];
    assert_eq!(train.templates(&idx).unwrap().shape(), &[2, D]);
    assert_eq!(train.images(&idx).unwrap().shape(), &[2, 3, SIDE, SIDE]);
    assert_eq!(train.layer_targets(&idx, Component::Eyes).unwrap().shape(), &[2, 3, SIDE, SIDE]);
}
