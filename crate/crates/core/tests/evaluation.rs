mod common;

use std::collections::BTreeMap;

use lbfti::domain::{Component, ComponentMask, FaceImage, FacialTemplate};
use lbfti::evaluation::*;
use lbfti::losses::{pixel_loss, ScaledIdentityTaps};
use lbfti::nn::seeded_rng;
use lbfti::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn pairs(scores: &[f64], tag: &str) -> Vec<ScoredPair> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &score)| ScoredPair {
            pair_id: format!("{tag}{i}"),
            score,
        })
        .collect()
}

fn score_set(genuine: &[f64], impostor: &[f64]) -> VerificationScoreSet {
    VerificationScoreSet::new(Protocol::Type1, pairs(genuine, "g"), pairs(impostor, "i")).unwrap()
}

/// Exhaustive search: every impostor score (and one above the maximum) is a
/// candidate; keep the lowest whose acceptance count fits the budget.
fn brute_force_threshold(impostor: &[f64], far: f64) -> f64 {
    let n = impostor.len();
    let budget = (far * n as f64 + 1e-9).floor() as usize;
    let max = impostor.iter().cloned().fold(f64::MIN, f64::max);
    let mut best = max + THRESHOLD_EPSILON;
    for &tau in impostor {
        let accepted = impostor.iter().filter(|&&s| s >= tau).count();
        if accepted <= budget && tau < best {
            best = tau;
        }
    }
    best
}

fn brute_force_tar(genuine: &[f64], tau: f64) -> f64 {
    genuine.iter().filter(|&&s| s >= tau).count() as f64 / genuine.len() as f64
}

/// Scores on a coarse grid so that ties are common.
fn random_scores(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| (rng.random_range(-20..=20) as f64) / 20.0).collect()
}

#[test]
fn calibration_and_tar_match_brute_force_on_50_sets() {
    let mut rng = seeded_rng(21);
    for case in 0..50 {
        let n_imp = rng.random_range(1..400);
        let n_gen = rng.random_range(1..100);
        let impostor = random_scores(&mut rng, n_imp);
        let genuine = random_scores(&mut rng, n_gen);
        let set = score_set(&genuine, &impostor);
        for far in [0.001, 0.01, 0.05, 0.1, 0.3, 0.5] {
            let tau = brute_force_threshold(&impostor, far);
            let cal = calibrate_threshold(&impostor, far).unwrap();
            assert_eq!(cal.threshold, tau, "case {case} far {far}");
            assert_eq!(tar_at_far(&set, far).unwrap(), brute_force_tar(&genuine, tau));
        }
    }
}

proptest! {
    #[test]
    fn empirical_far_never_exceeds_the_request(
        impostor in prop::collection::vec(-1.0f64..=1.0, 1..300),
        far in 0.0005f64..0.9,
        coarse in any::<bool>(),
    ) {
        let imp: Vec<f64> = if coarse { impostor.iter().map(|v| (v * 8.0).round() / 8.0).collect() } else { impostor };
        let cal = calibrate_threshold(&imp, far).unwrap();
        let accepted = imp.iter().filter(|&&s| s >= cal.threshold).count();
        prop_assert!(accepted as f64 / imp.len() as f64 <= far + 1e-12);
        prop_assert_eq!(cal.below_resolution, far * (imp.len() as f64) + 1e-9 < 1.0);
    }

    #[test]
    fn tar_is_monotone_in_far(
        genuine in prop::collection::vec(-1.0f64..=1.0, 1..100),
        impostor in prop::collection::vec(-1.0f64..=1.0, 1..300),
        mut fars in prop::collection::vec(0.0005f64..0.95, 2..6),
    ) {
        let set = score_set(&genuine, &impostor);
        fars.sort_by(f64::total_cmp);
        let tars: Vec<f64> = fars.iter().map(|&f| tar_at_far(&set, f).unwrap()).collect();
        prop_assert!(tars.windows(2).all(|w| w[0] <= w[1]), "{:?} -> {:?}", fars, tars);
    }
}

#[test]
fn identical_distributions_give_tar_near_far() {
    let mut rng = seeded_rng(22);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let genuine = draw(&mut rng);
    let impostor = draw(&mut rng);
    let set = score_set(&genuine, &impostor);
    for far in [0.01, 0.1, 0.3] {
        let tar = tar_at_far(&set, far).unwrap();
        assert!((tar - far).abs() <= 0.05, "far {far}: tar {tar}");
    }
}

#[test]
fn calibration_errors() {
    assert!(matches!(calibrate_threshold(&[0.1], 0.0), Err(Error::Range(_))));
    assert!(matches!(calibrate_threshold(&[0.1], 1.0), Err(Error::Range(_))));
    assert!(matches!(calibrate_threshold(&[], 0.1), Err(Error::Data(_))));
    assert!(matches!(calibrate_threshold(&[f64::NAN], 0.1), Err(Error::Numeric(_))));
    assert!(VerificationScoreSet::new(Protocol::Type2, pairs(&[1.5], "g"), pairs(&[0.0], "i")).is_err());
    let no_genuine = score_set(&[], &[0.2, 0.3]);
    assert!(matches!(tar_at_far(&no_genuine, 0.5), Err(Error::Data(_))));
}

fn labels(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn pair_plans() {
    let subjects = labels(&["a", "a", "a", "b", "b", "c"]);
    let cfg = PairConfig { impostor_factor: 1, seed: 3 };
    let t1 = plan_pairs(&subjects, Protocol::Type1, &cfg).unwrap();
    assert_eq!(t1.genuine, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
    assert_eq!(t1.impostor.len(), 6);
    let t2 = plan_pairs(&subjects, Protocol::Type2, &cfg).unwrap();
    assert_eq!(t2.genuine.len(), 3 * 2 + 2);
    assert_eq!(t2.n_failures, 1);
    for plan in [&t1, &t2] {
        assert!(plan.impostor.iter().all(|&(i, k)| subjects[i] != subjects[k]));
        let mut uniq = plan.impostor.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), plan.impostor.len());
    }
    // same seed, same plan; another seed, another sample
    assert_eq!(plan_pairs(&subjects, Protocol::Type1, &cfg).unwrap(), t1);
    let other = plan_pairs(&subjects, Protocol::Type1, &PairConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(other.impostor, t1.impostor);
    assert!(plan_pairs(&[], Protocol::Type1, &cfg).is_err());
}

#[test]
fn scored_pairs_use_cosine_similarity() {
    let t = |v: Vec<f64>| FacialTemplate::new(v).unwrap();
    let recon = vec![t(vec![1.0, 0.0]), t(vec![0.0, 1.0])];
    let refs = vec![t(vec![2.0, 0.0]), t(vec![1.0, 1.0])];
    let set = build_protocol_pairs(&recon, &refs, &labels(&["a", "b"]), Protocol::Type1, &PairConfig::default()).unwrap();
    let g: Vec<f64> = set.genuine_scores();
    assert_eq!(g[0], 1.0);
    assert!((g[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    assert_eq!(set.impostor.len(), 2);
}

fn random_image(rng: &mut impl Rng, side: usize) -> FaceImage<f64> {
    let px = (0..3 * side * side).map(|_| rng.random_range(-1.0..=1.0)).collect();
    FaceImage::new(Tensor::from_vec(&[3, side, side], px).unwrap()).unwrap()
}

fn random_masks(rng: &mut impl Rng, side: usize, density: f64) -> BTreeMap<Component, ComponentMask> {
    Component::ALL
        .iter()
        .map(|&c| {
            let bits: Vec<bool> = (0..side * side).map(|_| rng.random_bool(density)).collect();
            let mask = if bits.iter().any(|b| *b) {
                ComponentMask::new(c, side, side, bits).unwrap()
            } else {
                ComponentMask::failure(c, side, side)
            };
            (c, mask)
        })
        .collect()
}

fn full_masks(side: usize) -> BTreeMap<Component, ComponentMask> {
    Component::ALL.iter().map(|&c| (c, ComponentMask::full(c, side, side))).collect()
}

/// Plain loop over channels, rows and columns.
fn fapd_oracle(x: &FaceImage<f64>, y: &FaceImage<f64>, masks: &BTreeMap<Component, ComponentMask>) -> f64 {
    let side = x.side();
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for i in 0..side {
            for j in 0..side {
                let on = Component::FOREGROUND.iter().any(|k| masks[k].get(i, j));
                if on {
                    let d = x.get(c, i, j) - y.get(c, i, j);
                    sum += d * d;
                    if c == 0 {
                        count += 1;
                    }
                }
            }
        }
    }
    sum / (3 * count) as f64
}

#[test]
fn fapd_equals_its_loop_oracle() {
    let mut rng = seeded_rng(23);
    for case in 0..20 {
        let side = if case % 2 == 0 { 32 } else { 64 };
        let x = random_image(&mut rng, side);
        let y = random_image(&mut rng, side);
        let masks = random_masks(&mut rng, side, 0.02 + 0.02 * case as f64);
        let got = fapd(&x, &y, &masks).unwrap();
        assert_eq!(got, fapd_oracle(&x, &y, &masks));
        assert_eq!(got, fapd(&y, &x, &masks).unwrap());
        assert!((0.0..=4.0).contains(&got));
        assert_eq!(fapd(&x, &x, &masks).unwrap(), 0.0);
    }
}

#[test]
fn fapd_over_full_masks_is_the_pixel_loss() {
    let mut rng = seeded_rng(24);
    for side in [32, 64] {
        let x = random_image(&mut rng, side);
        let y = random_image(&mut rng, side);
        let masks = full_masks(side);
        assert_eq!(fapd(&x, &y, &masks).unwrap(), pixel_loss(&x, &y).unwrap());
        let c = fapc(&x, &y, &masks, &ScaledIdentityTaps::identity()).unwrap();
        assert!((c - pixel_loss(&x, &y).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn background_differences_do_not_count() {
    let mut rng = seeded_rng(25);
    let side = 32;
    let x = random_image(&mut rng, side);
    let mut masks = random_masks(&mut rng, side, 0.0);
    let mut bits = vec![false; side * side];
    bits[5 * side + 7] = true;
    masks.insert(Component::Nose, ComponentMask::new(Component::Nose, side, side, bits).unwrap());
    // differs from x everywhere except the single foreground pixel
    let mut px = x.pixels().map(|v| -v);
    for c in 0..3 {
        px.data_mut()[c * side * side + 5 * side + 7] = x.get(c, 5, 7);
    }
    let y = FaceImage::new(px).unwrap();
    assert_eq!(fapd(&x, &y, &masks).unwrap(), 0.0);
    assert_eq!(fapc(&x, &y, &masks, &ScaledIdentityTaps::identity()).unwrap(), 0.0);
}

#[test]
fn empty_foreground_is_a_data_error() {
    let mut rng = seeded_rng(26);
    let x = random_image(&mut rng, 32);
    let mut masks = random_masks(&mut rng, 32, 0.0);
    assert!(matches!(fapd(&x, &x, &masks), Err(Error::Data(_))));
    masks.remove(&Component::Eyes);
    assert!(matches!(fapd(&x, &x, &masks), Err(Error::Arity(_))));
    let failed: BTreeMap<Component, ComponentMask> =
        Component::ALL.iter().map(|&c| (c, ComponentMask::failure(c, 32, 32))).collect();
    assert!(matches!(fapd(&x, &x, &failed), Err(Error::Data(_))));
}

#[test]
fn evaluation_reports_count_failures_and_round_trip() {
    let (_, test) = common::tiny_data::<f64>(3, 3, 2);
    let ext = common::tiny_extractor::<f64>(9);
    let mut data = test;
    // one image whose landmarks failed
    let failed: BTreeMap<Component, ComponentMask> =
        Component::ALL.iter().map(|&c| (c, ComponentMask::failure(c, 32, 32))).collect();
    data.samples[0].masks = failed;
    let recon: Vec<FaceImage<f64>> = data.samples.iter().map(|s| s.image.clone()).collect();
    let report = evaluate("self", &recon, &data, &[&ext], vec!["other".into()], None, &EvalConfig::default()).unwrap();
    assert_eq!(report.n_images, 3);
    assert_eq!(report.n_failures, 1);
    assert_eq!(report.fapd, Some(0.0));
    assert_eq!(report.fapc, None);
    let e = report.extractor("tiny").unwrap();
    // perfect reconstructions are accepted at any FAR the impostors resolve
    assert_eq!(e.tar(Protocol::Type1, 0.01), Some(1.0));
    assert!(report.render().contains("skipped: other"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/eval.json");
    report.save(&path).unwrap();
    assert_eq!(EvalReport::load(&path).unwrap(), report);
    std::fs::write(&path, "{").unwrap();
    assert!(matches!(EvalReport::load(&path), Err(Error::Format { .. })));
}
