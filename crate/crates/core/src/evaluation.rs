//! Verification protocol (threshold calibration, TAR at fixed FAR) and
//! foreground-restricted image metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{extract_all, Dataset};
use crate::domain::{Component, ComponentMask, FaceImage, FacialTemplate};
use crate::error::{Error, Result};
use crate::extractor::{similarity, TemplateExtractor};
use crate::losses::{perceptual_loss, FeatureNetwork};
use crate::nn::seeded_rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Reconstruction vs. the image its template came from.
    Type1,
    /// Reconstruction vs. other images of the same subject.
    Type2,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Type1 => "type1",
            Protocol::Type2 => "type2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationScoreSet {
    pub protocol: Protocol,
    pub genuine: Vec<ScoredPair>,
    pub impostor: Vec<ScoredPair>,
    /// Reconstructions that had no genuine partner.
    pub n_failures: usize,
}

impl VerificationScoreSet {
    pub fn new(protocol: Protocol, genuine: Vec<ScoredPair>, impostor: Vec<ScoredPair>) -> Result<Self> {
        for p in genuine.iter().chain(&impostor) {
            if !(-1.0..=1.0).contains(&p.score) {
                return Err(Error::Range(format!("score {} of pair {} outside [-1, 1]", p.score, p.pair_id)));
            }
        }
        Ok(VerificationScoreSet {
            protocol,
            genuine,
            impostor,
            n_failures: 0,
        })
    }

    pub fn impostor_scores(&self) -> Vec<f64> {
        self.impostor.iter().map(|p| p.score).collect()
    }

    pub fn genuine_scores(&self) -> Vec<f64> {
        self.genuine.iter().map(|p| p.score).collect()
    }
}

/// Added to the largest impostor score when no impostor may be accepted.
pub const THRESHOLD_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    /// The requested FAR is finer than one impostor pair can resolve.
    pub below_resolution: bool,
}

fn check_far(far: f64) -> Result<()> {
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::Range(format!("FAR must lie in (0, 1), got {far}")));
    }
    Ok(())
}

/// Number of impostors that may be accepted at `far`; the epsilon absorbs
/// representation error in products such as `0.1 × 10`.
fn allowed(far: f64, n: usize) -> usize {
    (far * n as f64 + 1e-9).floor() as usize
}

/// The smallest impostor score `τ` with `|{s ≥ τ}| ≤ far·n`. Ties that would
/// overshoot push the threshold up to the next distinct score.
pub fn calibrate_threshold(impostor: &[f64], far: f64) -> Result<Calibration> {
    check_far(far)?;
    if impostor.is_empty() {
        return Err(Error::Data("no impostor scores to calibrate on".into()));
    }
    if impostor.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite impostor score".into()));
    }
    let mut s = impostor.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let k = allowed(far, s.len());
    let top = s[0] + THRESHOLD_EPSILON;
    let mut best = None;
    let mut i = 0;
    while i < s.len() {
        let v = s[i];
        let mut j = i;
        while j < s.len() && s[j] == v {
            j += 1;
        }
        // j scores are ≥ v
        if j > k {
            break;
        }
        best = Some(v);
        i = j;
    }
    Ok(Calibration {
        threshold: best.unwrap_or(top),
        below_resolution: k == 0,
    })
}

/// Fraction of genuine scores at or above the calibrated threshold.
pub fn tar_at_far(scores: &VerificationScoreSet, far: f64) -> Result<f64> {
    Ok(tar_with_threshold(scores, far)?.0)
}

pub fn tar_with_threshold(scores: &VerificationScoreSet, far: f64) -> Result<(f64, Calibration)> {
    let cal = calibrate_threshold(&scores.impostor_scores(), far)?;
    if scores.genuine.is_empty() {
        return Err(Error::Data("no genuine pairs".into()));
    }
    let hits = scores.genuine.iter().filter(|p| p.score >= cal.threshold).count();
    Ok((hits as f64 / scores.genuine.len() as f64, cal))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    /// Impostor pairs per genuine pair.
    pub impostor_factor: usize,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            impostor_factor: 10,
            seed: 0,
        }
    }
}

/// Index pairs `(reconstruction, reference image)` of one protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPlan {
    pub protocol: Protocol,
    pub genuine: Vec<(usize, usize)>,
    pub impostor: Vec<(usize, usize)>,
    pub n_failures: usize,
}

/// Plans the genuine and (seeded, distinct) impostor pairs over images labelled by `subjects`.
pub fn plan_pairs(subjects: &[String], protocol: Protocol, cfg: &PairConfig) -> Result<PairPlan> {
    let n = subjects.len();
    if n == 0 {
        return Err(Error::Data("no images to pair".into()));
    }
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in subjects.iter().enumerate() {
        by_subject.entry(s).or_default().push(i);
    }
    let mut genuine = Vec::new();
    let mut n_failures = 0;
    match protocol {
        Protocol::Type1 => genuine.extend((0..n).map(|i| (i, i))),
        Protocol::Type2 => {
            for i in 0..n {
                let same = &by_subject[subjects[i].as_str()];
                if same.len() < 2 {
                    n_failures += 1;
                    continue;
                }
                genuine.extend(same.iter().filter(|&&j| j != i).map(|&j| (i, j)));
            }
        }
    }
    let available: usize = (0..n).map(|i| n - by_subject[subjects[i].as_str()].len()).sum();
    let want = (genuine.len() * cfg.impostor_factor).min(available);
    let mut impostor = Vec::with_capacity(want);
    if want == available {
        for i in 0..n {
            for k in 0..n {
                if subjects[i] != subjects[k] {
                    impostor.push((i, k));
                }
            }
        }
    } else {
        let mut rng = seeded_rng(cfg.seed);
        let mut seen = BTreeSet::new();
        while impostor.len() < want {
            let (i, k) = (rng.random_range(0..n), rng.random_range(0..n));
            if subjects[i] != subjects[k] && seen.insert((i, k)) {
                impostor.push((i, k));
            }
        }
    }
    Ok(PairPlan {
        protocol,
        genuine,
        impostor,
        n_failures,
    })
}

/// Scores a pair plan: reconstructions' templates against reference templates.
pub fn score_pairs<T: Scalar>(
    plan: &PairPlan,
    recon: &[FacialTemplate<T>],
    reference: &[FacialTemplate<T>],
) -> Result<VerificationScoreSet> {
    if recon.len() != reference.len() {
        return Err(Error::Dimension(format!(
            "{} reconstructions but {} reference images",
            recon.len(),
            reference.len()
        )));
    }
    let score = |&(i, k): &(usize, usize)| -> Result<ScoredPair> {
        Ok(ScoredPair {
            pair_id: format!("{i}:{k}"),
            score: similarity(&recon[i], &reference[k])?.as_f64(),
        })
    };
    let genuine = plan.genuine.iter().map(score).collect::<Result<Vec<_>>>()?;
    let impostor = plan.impostor.iter().map(score).collect::<Result<Vec<_>>>()?;
    let mut set = VerificationScoreSet::new(plan.protocol, genuine, impostor)?;
    set.n_failures = plan.n_failures;
    Ok(set)
}

pub fn build_protocol_pairs<T: Scalar>(
    recon: &[FacialTemplate<T>],
    reference: &[FacialTemplate<T>],
    subjects: &[String],
    protocol: Protocol,
    cfg: &PairConfig,
) -> Result<VerificationScoreSet> {
    if subjects.len() != reference.len() {
        return Err(Error::Dimension("one subject label per reference image is required".into()));
    }
    score_pairs(&plan_pairs(subjects, protocol, cfg)?, recon, reference)
}

/// Union of the four foreground masks as `(height, width, bits)`.
pub fn foreground_bits(masks: &BTreeMap<Component, ComponentMask>) -> Result<(usize, usize, Vec<bool>)> {
    let mut it = Component::FOREGROUND.iter().map(|c| {
        masks
            .get(c)
            .ok_or_else(|| Error::Arity(format!("missing {} mask", c.name())))
    });
    let first = it.next().expect("four foreground components")?;
    let (h, w) = (first.height(), first.width());
    let mut bits = first.bits().to_vec();
    for m in it {
        let m = m?;
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Dimension("foreground masks differ in size".into()));
        }
        for (b, o) in bits.iter_mut().zip(m.bits()) {
            *b |= *o;
        }
    }
    Ok((h, w, bits))
}

fn check_fg<T: Scalar>(x: &FaceImage<T>, x_hat: &FaceImage<T>, h: usize, w: usize, bits: &[bool]) -> Result<usize> {
    if x.pixels().shape() != x_hat.pixels().shape() {
        return Err(Error::Dimension("images differ in size".into()));
    }
    if (h, w) != (x.side(), x.side()) {
        return Err(Error::Dimension("mask and image differ in size".into()));
    }
    let count = bits.iter().filter(|b| **b).count();
    if count == 0 {
        return Err(Error::Data("empty foreground (landmark detection failure)".into()));
    }
    Ok(count)
}

fn mask_image<T: Scalar>(x: &FaceImage<T>, bits: &[bool]) -> Result<FaceImage<T>> {
    let hw = bits.len();
    let mut px = x.pixels().clone();
    for (i, v) in px.data_mut().iter_mut().enumerate() {
        if !bits[i % hw] {
            *v = T::zero();
        }
    }
    FaceImage::new(px)
}

/// Mean squared error over the foreground pixels (all three channels).
pub fn fapd<T: Scalar>(x: &FaceImage<T>, x_hat: &FaceImage<T>, masks: &BTreeMap<Component, ComponentMask>) -> Result<f64> {
    let (h, w, fg) = foreground_bits(masks)?;
    let count = check_fg(x, x_hat, h, w, &fg)?;
    let hw = h * w;
    let (a, b) = (x.data(), x_hat.data());
    let mut sum = 0.0;
    for ch in 0..3 {
        for (p, &on) in fg.iter().enumerate() {
            if on {
                let d = a[ch * hw + p].as_f64() - b[ch * hw + p].as_f64();
                sum += d * d;
            }
        }
    }
    Ok(sum / (3 * count) as f64)
}

/// Perceptual distance between the foreground-masked images (background zeroed on both).
pub fn fapc<T: Scalar>(
    x: &FaceImage<T>,
    x_hat: &FaceImage<T>,
    masks: &BTreeMap<Component, ComponentMask>,
    fnet: &dyn FeatureNetwork<T>,
) -> Result<f64> {
    let (h, w, fg) = foreground_bits(masks)?;
    check_fg(x, x_hat, h, w, &fg)?;
    let a = mask_image(x, &fg)?;
    let b = mask_image(x_hat, &fg)?;
    Ok(perceptual_loss(&a, &b, fnet)?.as_f64())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarEntry {
    pub protocol: Protocol,
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
    pub below_resolution: bool,
}

/// Verification results of one extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorReport {
    pub extractor: String,
    pub role: String,
    pub tar_at: Vec<TarEntry>,
    pub n_pairs: usize,
    pub n_failures: usize,
}

impl ExtractorReport {
    pub fn tar(&self, protocol: Protocol, far: f64) -> Option<f64> {
        self.tar_at
            .iter()
            .find(|e| e.protocol == protocol && e.far == far)
            .map(|e| e.tar)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub extractors: Vec<ExtractorReport>,
    /// Extractors requested but unavailable.
    pub skipped: Vec<String>,
    pub fapd: Option<f64>,
    pub fapc: Option<f64>,
    pub n_images: usize,
    /// Images excluded from FAPD/FAPC for lack of a foreground.
    pub n_failures: usize,
}

impl EvalReport {
    pub fn extractor(&self, name: &str) -> Option<&ExtractorReport> {
        self.extractors.iter().find(|e| e.extractor == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }

    /// Plain-text table.
    pub fn render(&self) -> String {
        let mut out = format!("{}\n", self.label);
        out.push_str(&format!(
            "{:<16} {:>10} {:>10} {:>10} {:>10}\n",
            "extractor", "I@1%", "I@0.1%", "II@1%", "II@0.1%"
        ));
        for e in &self.extractors {
            let f = |p, far| e.tar(p, far).map_or("-".to_string(), |v| format!("{v:.4}"));
            out.push_str(&format!(
                "{:<16} {:>10} {:>10} {:>10} {:>10}\n",
                e.extractor,
                f(Protocol::Type1, 0.01),
                f(Protocol::Type1, 0.001),
                f(Protocol::Type2, 0.01),
                f(Protocol::Type2, 0.001)
            ));
        }
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "FAPD {}  FAPC {}  images {}  failures {}\n",
            opt(self.fapd),
            opt(self.fapc),
            self.n_images,
            self.n_failures
        ));
        for s in &self.skipped {
            out.push_str(&format!("skipped: {s}\n"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fars: Vec<f64>,
    pub pairs: PairConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fars: vec![0.01, 0.001],
            pairs: PairConfig::default(),
        }
    }
}

/// Verification report of `reconstructions[i]` (made from `data.samples[i]`'s template)
/// under one extractor, both protocols.
pub fn verify_with<T: Scalar>(
    extractor: &dyn TemplateExtractor<T>,
    reconstructions: &[FaceImage<T>],
    data: &Dataset<T>,
    cfg: &EvalConfig,
) -> Result<ExtractorReport> {
    let originals: Vec<FaceImage<T>> = data.samples.iter().map(|s| s.image.clone()).collect();
    let reference = extract_all(extractor, &originals)?;
    let recon = extract_all(extractor, reconstructions)?;
    let subjects = data.subjects();
    let mut tar_at = Vec::new();
    let (mut n_pairs, mut n_failures) = (0, 0);
    for protocol in [Protocol::Type1, Protocol::Type2] {
        let set = build_protocol_pairs(&recon, &reference, &subjects, protocol, &cfg.pairs)?;
        n_pairs += set.genuine.len() + set.impostor.len();
        n_failures += set.n_failures;
        if set.genuine.is_empty() {
            continue;
        }
        for &far in &cfg.fars {
            let (tar, cal) = tar_with_threshold(&set, far)?;
            tar_at.push(TarEntry {
                protocol,
                far,
                tar,
                threshold: cal.threshold,
                below_resolution: cal.below_resolution,
            });
        }
    }
    let d = extractor.descriptor();
    Ok(ExtractorReport {
        extractor: d.name.clone(),
        role: format!("{:?}", d.role).to_lowercase(),
        tar_at,
        n_pairs,
        n_failures,
    })
}

/// Full report: every available extractor, plus FAPD/FAPC over images with a foreground.
pub fn evaluate<T: Scalar>(
    label: &str,
    reconstructions: &[FaceImage<T>],
    data: &Dataset<T>,
    extractors: &[&dyn TemplateExtractor<T>],
    skipped: Vec<String>,
    fnet: Option<&dyn FeatureNetwork<T>>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if reconstructions.len() != data.len() {
        return Err(Error::Dimension(format!(
            "{} reconstructions for {} images",
            reconstructions.len(),
            data.len()
        )));
    }
    let reports = extractors
        .iter()
        .map(|e| verify_with(*e, reconstructions, data, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (mut d_sum, mut c_sum, mut n_ok, mut n_failures) = (0.0, 0.0, 0usize, 0usize);
    for (x_hat, s) in reconstructions.iter().zip(&data.samples) {
        match fapd(&s.image, x_hat, &s.masks) {
            Ok(v) => {
                d_sum += v;
                if let Some(f) = fnet {
                    c_sum += fapc(&s.image, x_hat, &s.masks, f)?;
                }
                n_ok += 1;
            }
            Err(Error::Data(_)) => n_failures += 1,
            Err(e) => return Err(e),
        }
    }
    let mean = |s: f64| (n_ok > 0).then(|| s / n_ok as f64);
    Ok(EvalReport {
        label: label.into(),
        extractors: reports,
        skipped,
        fapd: mean(d_sum),
        fapc: if fnet.is_some() { mean(c_sum) } else { None },
        n_images: data.len(),
        n_failures,
    })
}
