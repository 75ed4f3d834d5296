//! Reconstruction of whole datasets, evaluation of generator sets, and the
//! six-row ablation suite.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::domain::FaceImage;
use crate::error::Result;
use crate::evaluation::{evaluate, EvalConfig, EvalReport};
use crate::extractor::TemplateExtractor;
use crate::generators::{GeneratorArch, GeneratorSet};
use crate::losses::Stage;
use crate::scalar::Scalar;
use crate::training::{AblationFlags, Critics, StageConfigs, TrainOptions, TrainState};

/// Reconstructs every sample of `data` from its stored template.
pub fn reconstruct_all<T: Scalar>(gens: &GeneratorSet<T>, data: &Dataset<T>) -> Result<Vec<FaceImage<T>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(32) {
        let y = gens.reconstruct(&data.templates(chunk)?)?;
        for k in 0..chunk.len() {
            out.push(FaceImage::from_batch(&y, k)?);
        }
    }
    Ok(out)
}

/// Report for `gens` on `data`: the training extractor plus any unseen ones,
/// FAPC through the critics' feature network.
pub fn evaluate_generators<T: Scalar>(
    label: &str,
    gens: &GeneratorSet<T>,
    data: &Dataset<T>,
    critics: &Critics<T>,
    unseen: &[&dyn TemplateExtractor<T>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let recon = reconstruct_all(gens, data)?;
    let mut extractors: Vec<&dyn TemplateExtractor<T>> = vec![critics.extractor.as_ref()];
    extractors.extend_from_slice(unseen);
    evaluate(label, &recon, data, &extractors, Vec::new(), Some(critics.features.as_ref()), cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: usize,
    pub flags: AblationFlags,
    pub report: EvalReport,
}

/// Everything an ablation run needs besides the flags.
pub struct AblationSetup<'a, T: Scalar> {
    pub arch: GeneratorArch,
    pub stages: StageConfigs,
    pub options: TrainOptions,
    pub train: &'a Dataset<T>,
    pub test: &'a Dataset<T>,
    pub unseen: &'a [&'a dyn TemplateExtractor<T>],
    pub eval: EvalConfig,
}

fn row_label(row: usize) -> String {
    format!("row {row}")
}

/// Trains one row from scratch and evaluates it on the test split.
pub fn run_ablation<T: Scalar>(
    flags: AblationFlags,
    setup: &AblationSetup<'_, T>,
    critics: &mut Critics<T>,
) -> Result<(TrainState<T>, AblationResult)> {
    let row = flags.row_number()?;
    let mut state = TrainState::new(setup.arch.clone(), flags, setup.stages.clone(), setup.options.clone())?;
    state.run_remaining(setup.train, critics)?;
    let report = evaluate_generators(&row_label(row), &state.generators, setup.test, critics, setup.unseen, &setup.eval)?;
    Ok((state, AblationResult { row, flags, report }))
}

/// All six rows, sharing identical training prefixes: every row with layer
/// generators starts from one stage-1 run, rows 5 and 6 share stage 2. Each
/// generator has its own initialisation stream and every epoch its own
/// shuffle stream, so the results equal six independent runs.
pub fn run_ablation_suite<T: Scalar>(
    setup: &AblationSetup<'_, T>,
    critics: &mut Critics<T>,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::new();
    let finish = |row: usize, state: &TrainState<T>, critics: &Critics<T>, results: &mut Vec<AblationResult>| -> Result<()> {
        let report = evaluate_generators(&row_label(row), &state.generators, setup.test, critics, setup.unseen, &setup.eval)?;
        results.push(AblationResult {
            row,
            flags: state.flags,
            report,
        });
        Ok(())
    };

    progress("stage 1 (shared)");
    let mut base = TrainState::new(setup.arch.clone(), AblationFlags::full(), setup.stages.clone(), setup.options.clone())?;
    base.run_stage(Stage::One, setup.train, critics)?;

    progress("row 3");
    let r3 = base.derive(AblationFlags::row(3)?)?;
    finish(3, &r3, critics, &mut results)?;

    progress("rows 5 and 6");
    let mut full = base.derive(AblationFlags::full())?;
    full.run_stage(Stage::Two, setup.train, critics)?;
    let r5 = full.derive(AblationFlags::row(5)?)?;
    finish(5, &r5, critics, &mut results)?;
    full.run_stage(Stage::Three, setup.train, critics)?;
    finish(6, &full, critics, &mut results)?;

    progress("row 4");
    let mut r4 = base.derive(AblationFlags::row(4)?)?;
    r4.run_remaining(setup.train, critics)?;
    finish(4, &r4, critics, &mut results)?;

    progress("row 2");
    let mut r2 = base.derive(AblationFlags::row(2)?)?;
    r2.run_remaining(setup.train, critics)?;
    finish(2, &r2, critics, &mut results)?;

    progress("row 1");
    let (_, r1) = run_ablation(AblationFlags::row(1)?, setup, critics)?;
    results.push(r1);

    results.sort_by_key(|r| r.row);
    Ok(results)
}
