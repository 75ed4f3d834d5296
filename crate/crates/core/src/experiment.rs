//! Experiment configuration and assembly of datasets, extractors and critics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{build_datasets, load_manifest_samples, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::extractor::{
    train_toy_extractor, CommandExtractor, ExtractorDescriptor, ExtractorRole, ExtractorTrainConfig, TemplateExtractor,
    ToyExtractor, ToyExtractorArch,
};
use crate::generators::GeneratorArch;
use crate::losses::{AttributeNetConfig, LossWeights, RandomAttributeNet, TapNet, TapNetConfig};
use crate::masks::{generate_synthetic_face, JitterBounds, SyntheticFaceSpec};
use crate::scalar::Scalar;
use crate::training::{AblationFlags, Critics, StageConfigs, TrainOptions};

/// Synthetic identities a toy extractor is pre-trained on, disjoint from the
/// benchmark identities by construction of `first_identity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorPool {
    pub subjects: usize,
    pub images_per_subject: usize,
    pub first_identity: u64,
}

impl Default for ExtractorPool {
    fn default() -> Self {
        ExtractorPool {
            subjects: 256,
            images_per_subject: 8,
            first_identity: 1_000_000,
        }
    }
}

fn default_toy_train() -> ExtractorTrainConfig {
    ExtractorTrainConfig {
        epochs: 20,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ExtractorConfig {
    /// In-crate convolutional extractor, loaded from `checkpoint` when it
    /// exists, otherwise trained on `pool` (and saved to `checkpoint` if set).
    Toy {
        name: String,
        #[serde(default)]
        arch: ToyExtractorArch,
        #[serde(default)]
        checkpoint: Option<PathBuf>,
        #[serde(default)]
        pool: ExtractorPool,
        #[serde(default = "default_toy_train")]
        train: ExtractorTrainConfig,
    },
    /// External program, query-only.
    Command {
        name: String,
        d: usize,
        #[serde(default)]
        normalized: bool,
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::Toy {
            name: "toy".into(),
            arch: ToyExtractorArch::default(),
            checkpoint: None,
            pool: ExtractorPool::default(),
            train: default_toy_train(),
        }
    }
}

impl ExtractorConfig {
    pub fn name(&self) -> &str {
        match self {
            ExtractorConfig::Toy { name, .. } | ExtractorConfig::Command { name, .. } => name,
        }
    }

    pub fn template_dim(&self) -> usize {
        match self {
            ExtractorConfig::Toy { arch, .. } => arch.d,
            ExtractorConfig::Command { d, .. } => *d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchPreset {
    Toy,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub preset: ArchPreset,
    /// Full override of the preset.
    pub arch: Option<GeneratorArch>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            preset: ArchPreset::Toy,
            arch: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Line-delimited manifest; when absent the synthetic benchmark is rendered.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub features: TapNetConfig,
    pub attributes: AttributeNetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub unseen: Vec<ExtractorConfig>,
    #[serde(default)]
    pub generators: GeneratorConfig,
    #[serde(default)]
    pub stages: StageConfigs,
    #[serde(default)]
    pub training: TrainOptions,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub critics: CriticConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_resolution() -> usize {
    128
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            resolution: default_resolution(),
            out: None,
            data: DataConfig::default(),
            extractor: ExtractorConfig::default(),
            unseen: Vec::new(),
            generators: GeneratorConfig::default(),
            stages: StageConfigs::default(),
            training: TrainOptions::default(),
            ablation: AblationFlags::default(),
            critics: CriticConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The desk-scale benchmark: 64 × 8 synthetic faces at 128², toy
    /// networks, 10/10/4 epochs, template loss weighted up.
    pub fn toy() -> Self {
        let mut stages = StageConfigs::toy();
        stages.stage1.loss_weights = Some(LossWeights {
            w_tmp: TOY_TEMPLATE_WEIGHT,
            ..Default::default()
        });
        stages.stage2.loss_weights = stages.stage1.loss_weights;
        ExperimentConfig {
            stages,
            ..Default::default()
        }
    }

    pub fn arch(&self) -> GeneratorArch {
        match (&self.generators.arch, self.generators.preset) {
            (Some(a), _) => a.clone(),
            (None, ArchPreset::Toy) => GeneratorArch::toy(self.extractor.template_dim(), self.resolution),
            (None, ArchPreset::Reference) => GeneratorArch::reference(self.extractor.template_dim(), self.resolution),
        }
    }

    /// Training options with the experiment seed applied.
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            resolution: self.resolution,
            ..self.data.synthetic.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.arch();
        arch.validate().map_err(|e| Error::Config {
            key: "generators".into(),
            detail: e.to_string(),
        })?;
        if arch.resolution != self.resolution {
            return Err(Error::Config {
                key: "generators.arch.resolution".into(),
                detail: format!("{} disagrees with resolution = {}", arch.resolution, self.resolution),
            });
        }
        if arch.d != self.extractor.template_dim() {
            return Err(Error::Config {
                key: "generators.arch.d".into(),
                detail: "must equal the target extractor's template dimension".into(),
            });
        }
        self.stages.validate()?;
        self.ablation.validate().map_err(|e| Error::Config {
            key: "ablation".into(),
            detail: e.to_string(),
        })?;
        self.synthetic().validate()?;
        for (i, far) in self.eval.fars.iter().enumerate() {
            if !(*far > 0.0 && *far < 1.0) {
                return Err(Error::Config {
                    key: format!("eval.fars[{i}]"),
                    detail: "must lie in (0, 1)".into(),
                });
            }
        }
        Ok(())
    }
}

/// Weight of the template term in the toy configuration: with unit-norm
/// templates of length 512 the unweighted term is `2(1 − cos)/512`, far below
/// the pixel and perceptual terms; 500 brings it to roughly `2(1 − cos)`.
pub const TOY_TEMPLATE_WEIGHT: f64 = 500.0;

/// Renders the pool and trains a toy extractor on it.
pub fn pretrain_toy_extractor<T: Scalar>(
    name: &str,
    arch: &ToyExtractorArch,
    pool: &ExtractorPool,
    cfg: &ExtractorTrainConfig,
    resolution: usize,
) -> Result<(ToyExtractor<T>, Vec<f64>)> {
    let bounds = JitterBounds::default();
    let mut images = Vec::with_capacity(pool.subjects * pool.images_per_subject);
    let mut subjects = Vec::with_capacity(images.capacity());
    for s in 0..pool.subjects as u64 {
        for j in 0..pool.images_per_subject as u64 {
            let f = generate_synthetic_face::<T>(&SyntheticFaceSpec::sample(pool.first_identity + s, j, &bounds), resolution)?;
            images.push(f.image);
            subjects.push(f.subject_id);
        }
    }
    train_toy_extractor(name, &images, &subjects, arch, cfg)
}

/// Builds (or loads) the toy extractor a config describes.
pub fn resolve_toy<T: Scalar>(cfg: &ExtractorConfig, resolution: usize, log: &mut dyn FnMut(&str)) -> Result<ToyExtractor<T>> {
    let ExtractorConfig::Toy {
        name,
        arch,
        checkpoint,
        pool,
        train,
    } = cfg
    else {
        return Err(Error::Capability(format!("extractor `{}` is not a toy extractor", cfg.name())));
    };
    if let Some(p) = checkpoint.as_ref().filter(|p| p.exists()) {
        log(&format!("loading extractor `{name}` from {}", p.display()));
        let mut e = ToyExtractor::load(p)?;
        if e.arch() != arch {
            return Err(Error::Config {
                key: "extractor.arch".into(),
                detail: format!("checkpoint {} was trained with a different architecture", p.display()),
            });
        }
        e.rename(name.clone());
        return Ok(e);
    }
    log(&format!(
        "training extractor `{name}` on {} × {} pool identities",
        pool.subjects, pool.images_per_subject
    ));
    let (e, _) = pretrain_toy_extractor(name, arch, pool, train, resolution)?;
    if let Some(p) = checkpoint {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        e.save(p)?;
    }
    Ok(e)
}

/// Any configured extractor; `None` when an external program is missing.
pub fn resolve_extractor<T: Scalar>(
    cfg: &ExtractorConfig,
    role: ExtractorRole,
    resolution: usize,
    log: &mut dyn FnMut(&str),
) -> Result<Option<Box<dyn TemplateExtractor<T>>>> {
    match cfg {
        ExtractorConfig::Toy { .. } => {
            let mut e = resolve_toy::<T>(cfg, resolution, log)?;
            e.set_role(role);
            Ok(Some(Box::new(e)))
        }
        ExtractorConfig::Command {
            name,
            d,
            normalized,
            program,
            args,
        } => {
            if !program_exists(program) {
                return Ok(None);
            }
            let desc = ExtractorDescriptor::new(name.clone(), *d, *normalized, false, role)?;
            Ok(Some(Box::new(CommandExtractor::new(desc, program, args.clone()))))
        }
    }
}

fn program_exists(p: &Path) -> bool {
    if p.components().count() > 1 {
        return p.exists();
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|d| d.join(p).exists()))
        .unwrap_or(false)
}

pub fn build_critics<T: Scalar>(cfg: &ExperimentConfig, extractor: Box<dyn TemplateExtractor<T>>) -> Critics<T> {
    Critics {
        extractor,
        features: Box::new(TapNet::new(&cfg.critics.features)),
        attributes: Box::new(RandomAttributeNet::new(&cfg.critics.attributes)),
    }
}

/// Train/test datasets with templates from `extractor`.
pub fn load_datasets<T: Scalar>(
    cfg: &ExperimentConfig,
    extractor: &dyn TemplateExtractor<T>,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let raw = match &cfg.data.manifest {
        Some(m) => load_manifest_samples::<T>(m)?,
        None => cfg.synthetic().render::<T>()?,
    };
    if let Some(s) = raw.first() {
        if s.image.side() != cfg.resolution {
            return Err(Error::Config {
                key: "resolution".into(),
                detail: format!("dataset images are {0}×{0}, config says {1}", s.image.side(), cfg.resolution),
            });
        }
    }
    build_datasets(raw, extractor)
}

/// Everything a run needs, assembled from a config.
pub struct Prepared<T: Scalar> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub critics: Critics<T>,
    pub unseen: Vec<Box<dyn TemplateExtractor<T>>>,
    pub skipped: Vec<String>,
}

impl<T: Scalar> Prepared<T> {
    pub fn unseen_refs(&self) -> Vec<&dyn TemplateExtractor<T>> {
        self.unseen.iter().map(|e| e.as_ref()).collect()
    }
}

pub fn prepare<T: Scalar>(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Prepared<T>> {
    cfg.validate()?;
    let target = resolve_extractor::<T>(&cfg.extractor, ExtractorRole::Target, cfg.resolution, log)?
        .ok_or_else(|| Error::Capability(format!("target extractor `{}` is unavailable", cfg.extractor.name())))?;
    let mut unseen = Vec::new();
    let mut skipped = Vec::new();
    for u in &cfg.unseen {
        match resolve_extractor::<T>(u, ExtractorRole::Unseen, cfg.resolution, log)? {
            Some(e) => unseen.push(e),
            None => skipped.push(u.name().to_string()),
        }
    }
    log("rendering datasets");
    let (train, test) = load_datasets(cfg, target.as_ref())?;
    Ok(Prepared {
        train,
        test,
        critics: build_critics(cfg, target),
        unseen,
        skipped,
    })
}
