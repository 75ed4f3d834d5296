//! Three-stage training with freezing, ablation switches, and run bookkeeping.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::domain::Component;
use crate::error::{Error, Result};
use crate::extractor::TemplateExtractor;
use crate::generators::{layer_key as layer_name, stack_layers, GeneratorArch, GeneratorSet, PanoInputs};
use crate::losses::{
    objective_with_grad, AttributeClassifier, FeatureNetwork, GeneratorRole, LossNetworks, LossParts, LossWeights,
    Stage, Targets,
};
use crate::nn::{seeded_rng, Adam, AdamConfig, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hyper-parameters of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Stages 1 and 2: `None` means all weights 1. Stage 3: `None` means
    /// every generator keeps the weights of the stage it was trained in.
    #[serde(default)]
    pub loss_weights: Option<LossWeights>,
}

fn default_batch() -> usize {
    32
}

impl StageConfig {
    pub fn reference(stage: Stage) -> Self {
        let (epochs, learning_rate) = match stage {
            Stage::One | Stage::Two => (100, 2e-4),
            Stage::Three => (20, 1e-4),
        };
        StageConfig {
            epochs,
            learning_rate,
            batch_size: 32,
            loss_weights: None,
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        let key = |f: &str| format!("stages.stage{}.{f}", stage.number());
        if self.epochs == 0 {
            return Err(Error::Config {
                key: key("epochs"),
                detail: "must be at least 1".into(),
            });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config {
                key: key("learning_rate"),
                detail: "must be positive".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                key: key("batch_size"),
                detail: "must be at least 1".into(),
            });
        }
        if let Some(w) = &self.loss_weights {
            w.validate().map_err(|e| Error::Config {
                key: key("loss_weights"),
                detail: e.to_string(),
            })?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfigs {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for StageConfigs {
    fn default() -> Self {
        StageConfigs {
            stage1: StageConfig::reference(Stage::One),
            stage2: StageConfig::reference(Stage::Two),
            stage3: StageConfig::reference(Stage::Three),
        }
    }
}

impl StageConfigs {
    /// Scaled-down schedule for desk-scale runs: 10/10/4 epochs. With
    /// only ~400 training images, batches of 8 and five times the reference
    /// learning rates give the optimiser enough steps to get anywhere.
    pub fn toy() -> Self {
        let mut s = Self::default();
        for (cfg, epochs, lr) in [(&mut s.stage1, 10, 1e-3), (&mut s.stage2, 10, 1e-3), (&mut s.stage3, 4, 5e-4)] {
            cfg.epochs = epochs;
            cfg.batch_size = 8;
            cfg.learning_rate = lr;
        }
        s
    }

    pub fn get(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
            Stage::Three => &self.stage3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in [Stage::One, Stage::Two, Stage::Three] {
            self.get(s).validate(s)?;
        }
        Ok(())
    }

    fn weights(&self, stage: Stage) -> LossWeights {
        self.get(stage).loss_weights.unwrap_or_default()
    }

    /// Weights a generator's objective uses in `stage`.
    pub fn weights_for(&self, stage: Stage, role: GeneratorRole) -> LossWeights {
        match (stage, role) {
            (Stage::Three, r) => self.stage3.loss_weights.unwrap_or_else(|| match r {
                GeneratorRole::Layer(_) => self.weights(Stage::One),
                GeneratorRole::Panorama => self.weights(Stage::Two),
            }),
            (s, _) => self.weights(s),
        }
    }
}

/// The five switches of the ablation table: foreground layers trained in
/// stage 1, midground (skin) trained in stage 1, panorama stage, secondary
/// template injection in stage 2, joint fine-tuning stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub f_s1: bool,
    pub m_s1: bool,
    pub s2: bool,
    pub ft_s2: bool,
    pub s3: bool,
}

impl AblationFlags {
    pub const ROWS: [AblationFlags; 6] = [
        AblationFlags::new(false, false, true, true, false),
        AblationFlags::new(true, false, true, true, true),
        AblationFlags::new(true, true, false, false, false),
        AblationFlags::new(true, true, true, false, true),
        AblationFlags::new(true, true, true, true, false),
        AblationFlags::new(true, true, true, true, true),
    ];

    pub const fn new(f_s1: bool, m_s1: bool, s2: bool, ft_s2: bool, s3: bool) -> Self {
        AblationFlags { f_s1, m_s1, s2, ft_s2, s3 }
    }

    pub fn full() -> Self {
        Self::ROWS[5]
    }

    /// Flags of table row `n` (1-based).
    pub fn row(n: usize) -> Result<Self> {
        n.checked_sub(1)
            .and_then(|i| Self::ROWS.get(i))
            .copied()
            .ok_or_else(|| Error::Ablation(format!("there is no row {n}; rows are 1..=6")))
    }

    /// The 1-based row these flags correspond to.
    pub fn row_number(&self) -> Result<usize> {
        Self::ROWS
            .iter()
            .position(|r| r == self)
            .map(|i| i + 1)
            .ok_or_else(|| Error::Ablation(format!("flag combination {self:?} is not one of the six supported rows")))
    }

    pub fn validate(&self) -> Result<()> {
        self.row_number().map(|_| ())
    }

    pub fn components(&self) -> Vec<Component> {
        Component::ALL
            .into_iter()
            .filter(|c| if *c == Component::Skin { self.m_s1 } else { self.f_s1 })
            .collect()
    }

    pub fn has_layers(&self) -> bool {
        self.f_s1 || self.m_s1
    }

    pub fn pano_inputs(&self) -> PanoInputs {
        PanoInputs {
            inject_template: self.ft_s2,
            use_encoder: self.has_layers(),
        }
    }

    /// Stages this row executes, in order.
    pub fn stages(&self) -> Vec<Stage> {
        let mut v = Vec::new();
        if self.has_layers() {
            v.push(Stage::One);
        }
        if self.s2 {
            v.push(Stage::Two);
        }
        if self.s3 {
            v.push(Stage::Three);
        }
        v
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

/// Switches not fixed by the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    /// Compare L2-normalised templates in the template loss.
    pub normalize_templates: bool,
    /// Apply the template loss to individual layers in stage 1 (and to layer generators in stage 3).
    pub stage1_template_loss: bool,
    /// In stage 3, also propagate the panorama objective into the layer generators.
    pub stage3_joint_backprop: bool,
    pub seed: u64,
    /// Intermediate checkpoint cadence in epochs; 0 writes stage-boundary checkpoints only.
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            normalize_templates: true,
            stage1_template_loss: true,
            stage3_joint_backprop: false,
            seed: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// Frozen networks the objectives are evaluated through.
pub struct Critics<T: Scalar> {
    pub extractor: Box<dyn TemplateExtractor<T>>,
    pub features: Box<dyn FeatureNetwork<T>>,
    pub attributes: Box<dyn AttributeClassifier<T>>,
}

impl<T: Scalar> Critics<T> {
    pub fn networks(&mut self, normalize_templates: bool) -> LossNetworks<'_, T> {
        LossNetworks {
            extractor: self.extractor.as_mut(),
            features: self.features.as_mut(),
            attributes: self.attributes.as_mut(),
            normalize_templates,
        }
    }
}

/// Mean loss of one generator over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub generator: String,
    pub loss: f64,
    pub parts: LossParts,
    pub samples: usize,
}

#[derive(Default)]
struct Accum {
    loss: f64,
    parts: [f64; 4],
    seen: [bool; 4],
    n: usize,
}

impl Accum {
    fn add(&mut self, loss: f64, p: &LossParts, n: usize) {
        let w = n as f64;
        self.loss += loss * w;
        for (i, v) in [p.template, p.pixel, p.perceptual, p.attribute].into_iter().enumerate() {
            if let Some(v) = v {
                self.parts[i] += v * w;
                self.seen[i] = true;
            }
        }
        self.n += n;
    }

    fn finish(&self, stage: Stage, epoch: usize, generator: String) -> EpochRecord {
        let n = self.n.max(1) as f64;
        let part = |i: usize| self.seen[i].then(|| self.parts[i] / n);
        EpochRecord {
            stage,
            epoch,
            generator,
            loss: self.loss / n,
            parts: LossParts {
                template: part(0),
                pixel: part(1),
                perceptual: part(2),
                attribute: part(3),
            },
            samples: self.n,
        }
    }
}

const PANO: &str = "pano";

/// Shuffled mini-batches for one epoch; a trailing batch of one sample is
/// merged into its predecessor so batch statistics stay defined.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let stream = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stage.number() as u64 * 1_000_000 + epoch as u64);
    idx.shuffle(&mut seeded_rng(stream));
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Run directory: `config.*` snapshot (written by the caller), `metrics.jsonl`,
/// and `checkpoints/stage{n}.tar` plus optional `stage{n}_epoch{e}.tar`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints"))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn stage_checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("stage{}.tar", stage.number()))
    }

    pub fn epoch_checkpoint(&self, stage: Stage, epoch: usize) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("stage{}_epoch{:03}.tar", stage.number(), epoch))
    }

    fn append(&self, records: &[EpochRecord]) -> Result<()> {
        let mut f: File = OpenOptions::new().create(true).append(true).open(self.metrics_path())?;
        for r in records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }
}

/// Everything a training run owns.
pub struct TrainState<T: Scalar> {
    pub generators: GeneratorSet<T>,
    pub flags: AblationFlags,
    pub options: TrainOptions,
    pub stages: StageConfigs,
    /// Last completed stage.
    pub completed: Option<Stage>,
    /// Epochs finished within the stage in progress.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    optimizers: BTreeMap<String, Adam>,
    run_dir: Option<RunDir>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(arch: GeneratorArch, flags: AblationFlags, stages: StageConfigs, options: TrainOptions) -> Result<Self> {
        flags.validate()?;
        stages.validate()?;
        let mut generators = GeneratorSet::new(arch, &flags.components(), flags.s2, options.seed)?;
        generators.pano_inputs = flags.pano_inputs();
        Ok(TrainState {
            generators,
            flags,
            options,
            stages,
            completed: None,
            epoch: 0,
            history: Vec::new(),
            optimizers: BTreeMap::new(),
            run_dir: None,
        })
    }

    /// Resumes after `completed` with already-trained generators.
    pub fn resume(
        mut generators: GeneratorSet<T>,
        completed: Stage,
        flags: AblationFlags,
        stages: StageConfigs,
        options: TrainOptions,
    ) -> Result<Self> {
        flags.validate()?;
        stages.validate()?;
        let want = flags.components();
        let have: Vec<Component> = generators.layers.keys().copied().collect();
        if want != have || generators.panorama.is_some() != flags.s2 {
            return Err(Error::Ablation(format!(
                "checkpoint holds {:?} but the configured row needs {:?}",
                generators.names(),
                want.iter().map(|c| layer_name(*c)).collect::<Vec<_>>()
            )));
        }
        generators.pano_inputs = flags.pano_inputs();
        Ok(TrainState {
            generators,
            flags,
            options,
            stages,
            completed: Some(completed),
            epoch: 0,
            history: Vec::new(),
            optimizers: BTreeMap::new(),
            run_dir: None,
        })
    }

    /// A copy of this state re-targeted at another ablation row: generators
    /// the row does not use are dropped; history and stage tag carry over.
    pub fn derive(&self, flags: AblationFlags) -> Result<Self> {
        flags.validate()?;
        let mut generators = self.generators.try_clone()?;
        generators.retain(&flags.components(), flags.s2);
        for c in flags.components() {
            if !generators.layers.contains_key(&c) {
                return Err(Error::Ablation(format!("cannot derive a row that needs the missing {} generator", layer_name(c))));
            }
        }
        if flags.s2 && generators.panorama.is_none() {
            return Err(Error::Ablation("cannot derive a row that needs the missing panorama generator".into()));
        }
        generators.pano_inputs = flags.pano_inputs();
        Ok(TrainState {
            generators,
            flags,
            options: self.options.clone(),
            stages: self.stages.clone(),
            completed: self.completed,
            epoch: 0,
            history: self.history.clone(),
            optimizers: BTreeMap::new(),
            run_dir: None,
        })
    }

    pub fn with_run_dir(mut self, dir: RunDir) -> Self {
        self.run_dir = Some(dir);
        self
    }

    pub fn run_dir(&self) -> Option<&RunDir> {
        self.run_dir.as_ref()
    }

    /// Per-generator loss history of one stage, ordered by epoch.
    pub fn losses(&self, stage: Stage, generator: &str) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.stage == stage && r.generator == generator)
            .map(|r| r.loss)
            .collect()
    }

    fn check_entry(&self, stage: Stage) -> Result<()> {
        let enabled = match stage {
            Stage::One => self.flags.has_layers(),
            Stage::Two => self.flags.s2,
            Stage::Three => self.flags.s3,
        };
        if !enabled {
            return Err(Error::Ablation(format!(
                "stage {} is disabled for row {}",
                stage.number(),
                self.flags.row_number()?
            )));
        }
        let expected = match stage {
            Stage::One => None,
            // without layer generators there is no stage 1 to wait for
            Stage::Two if !self.flags.has_layers() => None,
            Stage::Two => Some(Stage::One),
            Stage::Three => Some(Stage::Two),
        };
        if self.completed != expected {
            return Err(Error::StageOrder(format!(
                "stage {} cannot follow {}",
                stage.number(),
                self.completed.map_or("a fresh start".into(), |s| format!("stage {}", s.number()))
            )));
        }
        Ok(())
    }

    /// Fresh optimizers (and moments) for the generators trained in `stage`.
    fn reset_optimizers(&mut self, stage: Stage, names: &[String]) {
        let lr = self.stages.get(stage).learning_rate;
        self.optimizers.clear();
        for name in names {
            let mut opt = Adam::new(lr, self.options.adam);
            if name == PANO {
                if let Some(p) = &mut self.generators.panorama {
                    opt.reset(p);
                }
            } else if let Some(g) = self.generators.layers.iter_mut().find(|(c, _)| &layer_name(**c) == name) {
                opt.reset(g.1);
            }
            self.optimizers.insert(name.clone(), opt);
        }
    }

    fn finish_epoch(&mut self, stage: Stage, records: Vec<EpochRecord>) -> Result<()> {
        self.epoch += 1;
        if let Some(dir) = &self.run_dir {
            dir.append(&records)?;
            let every = self.options.checkpoint_every;
            if every > 0 && self.epoch % every == 0 && self.epoch < self.stages.get(stage).epochs {
                self.generators.save(&dir.epoch_checkpoint(stage, self.epoch), stage)?;
            }
        }
        self.history.extend(records);
        Ok(())
    }

    fn finish_stage(&mut self, stage: Stage) -> Result<()> {
        self.completed = Some(stage);
        self.epoch = 0;
        self.optimizers.clear();
        if let Some(dir) = &self.run_dir {
            self.generators.save(&dir.stage_checkpoint(stage), stage)?;
        }
        Ok(())
    }

    /// Trains every layer generator independently against its masked layer targets.
    pub fn run_stage1(&mut self, data: &Dataset<T>, critics: &mut Critics<T>) -> Result<()> {
        self.check_entry(Stage::One)?;
        check_data(data)?;
        let cfg = self.stages.stage1.clone();
        let w = self.stages.weights_for(Stage::One, GeneratorRole::Layer(Component::Skin));
        let comps: Vec<Component> = self.generators.layers.keys().copied().collect();
        let names: Vec<String> = comps.iter().map(|c| layer_name(*c)).collect();
        self.generators.set_trainable(true);
        self.reset_optimizers(Stage::One, &names);
        let use_template = self.options.stage1_template_loss;
        for epoch in 0..cfg.epochs {
            let mut acc: Vec<Accum> = comps.iter().map(|_| Accum::default()).collect();
            for batch in epoch_batches(data.len(), cfg.batch_size, self.options.seed, Stage::One, epoch) {
                let t = data.templates(&batch)?;
                for (k, c) in comps.iter().enumerate() {
                    let target = data.layer_targets(&batch, *c)?;
                    let gen = self.generators.layers.get_mut(c).expect("component present");
                    let y = gen.forward(&t, Mode::Train)?;
                    let targets = Targets {
                        images: &target,
                        templates: &t,
                        use_template,
                    };
                    let mut nets = critics.networks(self.options.normalize_templates);
                    let (loss, parts, dy) =
                        objective_with_grad(&mut nets, Stage::One, GeneratorRole::Layer(*c), &w, &y, &targets)?;
                    check_finite(loss, &names[k])?;
                    gen.backward(&dy);
                    gen.apply_update(self.optimizers.get_mut(&names[k]).expect("optimizer"));
                    acc[k].add(loss, &parts, batch.len());
                }
            }
            let records = acc
                .iter()
                .zip(&names)
                .map(|(a, n)| a.finish(Stage::One, epoch, n.clone()))
                .collect();
            self.finish_epoch(Stage::One, records)?;
        }
        self.finish_stage(Stage::One)
    }

    /// Freezes all layer generators and trains the panorama generator on their outputs.
    pub fn run_stage2(&mut self, data: &Dataset<T>, critics: &mut Critics<T>) -> Result<()> {
        self.check_entry(Stage::Two)?;
        check_data(data)?;
        let cfg = self.stages.stage2.clone();
        let w = self.stages.weights_for(Stage::Two, GeneratorRole::Panorama);
        for g in self.generators.layers.values_mut() {
            g.set_trainable(false);
        }
        self.generators.panorama_mut()?.set_trainable(true);
        self.reset_optimizers(Stage::Two, &[PANO.to_string()]);
        let inputs = self.flags.pano_inputs();
        for epoch in 0..cfg.epochs {
            let mut acc = Accum::default();
            for batch in epoch_batches(data.len(), cfg.batch_size, self.options.seed, Stage::Two, epoch) {
                let t = data.templates(&batch)?;
                let images = data.images(&batch)?;
                let stacked = stack_layers(&self.generators.layer_outputs(&t)?)?;
                let pano = self.generators.panorama.as_mut().expect("checked above");
                let y = pano.forward(&stacked, &t, inputs, Mode::Train)?;
                let targets = Targets {
                    images: &images,
                    templates: &t,
                    use_template: true,
                };
                let mut nets = critics.networks(self.options.normalize_templates);
                let (loss, parts, dy) =
                    objective_with_grad(&mut nets, Stage::Two, GeneratorRole::Panorama, &w, &y, &targets)?;
                check_finite(loss, PANO)?;
                pano.backward(&dy, false)?;
                pano.apply_update(self.optimizers.get_mut(PANO).expect("optimizer"));
                acc.add(loss, &parts, batch.len());
            }
            self.finish_epoch(Stage::Two, vec![acc.finish(Stage::Two, epoch, PANO.into())])?;
        }
        self.generators.set_trainable(true);
        self.finish_stage(Stage::Two)
    }

    /// Unfreezes everything and fine-tunes all generators together, each
    /// under the objective of the stage it was trained in.
    pub fn run_stage3(&mut self, data: &Dataset<T>, critics: &mut Critics<T>) -> Result<()> {
        self.check_entry(Stage::Three)?;
        check_data(data)?;
        let cfg = self.stages.stage3.clone();
        let w_pano = self.stages.weights_for(Stage::Three, GeneratorRole::Panorama);
        let w_layer = self.stages.weights_for(Stage::Three, GeneratorRole::Layer(Component::Skin));
        let comps: Vec<Component> = self.generators.layers.keys().copied().collect();
        let mut names: Vec<String> = comps.iter().map(|c| layer_name(*c)).collect();
        names.push(PANO.into());
        self.generators.set_trainable(true);
        self.reset_optimizers(Stage::Three, &names);
        let inputs = self.flags.pano_inputs();
        let joint = self.options.stage3_joint_backprop;
        let use_template = self.options.stage1_template_loss;
        let side = self.generators.arch.resolution;
        for epoch in 0..cfg.epochs {
            let mut acc: Vec<Accum> = names.iter().map(|_| Accum::default()).collect();
            for batch in epoch_batches(data.len(), cfg.batch_size, self.options.seed, Stage::Three, epoch) {
                let t = data.templates(&batch)?;
                let images = data.images(&batch)?;
                let n = batch.len();
                let mut outputs = BTreeMap::new();
                let mut grads = BTreeMap::new();
                for (k, c) in comps.iter().enumerate() {
                    let target = data.layer_targets(&batch, *c)?;
                    let gen = self.generators.layers.get_mut(c).expect("component present");
                    let y = gen.forward(&t, Mode::Train)?;
                    let targets = Targets {
                        images: &target,
                        templates: &t,
                        use_template,
                    };
                    let mut nets = critics.networks(self.options.normalize_templates);
                    let (loss, parts, dy) =
                        objective_with_grad(&mut nets, Stage::Three, GeneratorRole::Layer(*c), &w_layer, &y, &targets)?;
                    check_finite(loss, &names[k])?;
                    acc[k].add(loss, &parts, n);
                    outputs.insert(*c, y);
                    grads.insert(*c, dy);
                }
                for c in Component::ALL {
                    outputs.entry(c).or_insert_with(|| Tensor::zeros(&[n, 3, side, side]));
                }
                let stacked = stack_layers(&outputs)?;
                let pano = self.generators.panorama.as_mut().expect("stage 3 rows have a panorama generator");
                let y = pano.forward(&stacked, &t, inputs, Mode::Train)?;
                let targets = Targets {
                    images: &images,
                    templates: &t,
                    use_template: true,
                };
                let mut nets = critics.networks(self.options.normalize_templates);
                let (loss, parts, dy) =
                    objective_with_grad(&mut nets, Stage::Three, GeneratorRole::Panorama, &w_pano, &y, &targets)?;
                check_finite(loss, PANO)?;
                acc[comps.len()].add(loss, &parts, n);
                let d_layers = pano.backward(&dy, joint)?;
                pano.apply_update(self.optimizers.get_mut(PANO).expect("optimizer"));
                if let Some(dl) = d_layers {
                    let parts = dl.split_channels(&[3; 5]);
                    for (c, d) in Component::ALL.iter().zip(parts) {
                        if let Some(g) = grads.get_mut(c) {
                            g.add_assign(&d);
                        }
                    }
                }
                for (k, c) in comps.iter().enumerate() {
                    let gen = self.generators.layers.get_mut(c).expect("component present");
                    gen.backward(&grads[c]);
                    gen.apply_update(self.optimizers.get_mut(&names[k]).expect("optimizer"));
                }
            }
            let records = acc
                .iter()
                .zip(&names)
                .map(|(a, nm)| a.finish(Stage::Three, epoch, nm.clone()))
                .collect();
            self.finish_epoch(Stage::Three, records)?;
        }
        self.finish_stage(Stage::Three)
    }

    pub fn run_stage(&mut self, stage: Stage, data: &Dataset<T>, critics: &mut Critics<T>) -> Result<()> {
        match stage {
            Stage::One => self.run_stage1(data, critics),
            Stage::Two => self.run_stage2(data, critics),
            Stage::Three => self.run_stage3(data, critics),
        }
    }

    /// Runs every stage of the configured row that has not completed yet.
    pub fn run_remaining(&mut self, data: &Dataset<T>, critics: &mut Critics<T>) -> Result<()> {
        for stage in self.flags.stages() {
            if self.completed.is_some_and(|c| c >= stage) {
                continue;
            }
            self.run_stage(stage, data, critics)?;
        }
        Ok(())
    }
}

fn check_data<T: Scalar>(data: &Dataset<T>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    Ok(())
}

fn check_finite(loss: f64, who: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss for {who}")));
    }
    Ok(())
}
