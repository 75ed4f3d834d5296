mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lbfti::ablation::{evaluate_generators, reconstruct_all, run_ablation_suite, AblationResult, AblationSetup};
use lbfti::data::{extract_all, load_manifest_samples, write_synthetic, SyntheticSpec};
use lbfti::domain::{FaceImage, FacialTemplate};
use lbfti::evaluation::EvalReport;
use lbfti::experiment::{prepare, resolve_extractor, ExperimentConfig, Prepared};
use lbfti::extractor::{ExtractorRole, TemplateExtractor};
use lbfti::generators::GeneratorSet;
use lbfti::io::{read_jsonl, save_grid, save_image, write_jsonl, TemplateRecord};
use lbfti::losses::Stage;
use lbfti::training::{RunDir, TrainState};

use config::UsageError;

#[derive(Parser)]
#[command(name = "lbfti", version, about = "Layered facial template inversion lab")]
struct Cli {
    /// Single-threaded execution (bit-reproducible runs).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment config (TOML); the built-in toy config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic faces, mask sidecars and a manifest.
    Synth {
        #[arg(long, default_value_t = 64)]
        subjects: usize,
        #[arg(long, default_value_t = 8)]
        per_subject: usize,
        /// Images per subject in the train split (the rest are test).
        #[arg(long)]
        train_per_subject: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
    },
    /// Train generators per the config's stages and ablation flags.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume point: start at this stage from the previous stage's checkpoint.
        #[arg(long)]
        stage: Option<u8>,
        /// Checkpoint to resume from (default: the run directory's previous-stage checkpoint).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write a templates file for the images of a manifest using the target extractor.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        templates: PathBuf,
    },
    /// Reconstruct faces from templates (or from images via the target extractor).
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "images", required_unless_present = "images")]
        templates: Option<PathBuf>,
        /// Manifest of original images; also writes an original/reconstruction grid.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate all six ablation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Pretty-print an evaluation or ablation report.
    Report { file: PathBuf },
}

fn log(msg: &str) {
    eprintln!("[lbfti] {msg}");
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, Option<String>)> {
    let (mut cfg, text) = match &c.config {
        Some(p) => {
            let (cfg, text) = config::load(p)?;
            (cfg, Some(text))
        }
        None => (ExperimentConfig::toy(), None),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.resolution {
        cfg.resolution = r;
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok((cfg, text))
}

fn out_dir(cfg: &ExperimentConfig, fallback: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn cmd_synth(
    subjects: usize,
    per_subject: usize,
    train_per_subject: Option<usize>,
    out: &Path,
    seed: u64,
    resolution: usize,
) -> Result<()> {
    if subjects == 0 || per_subject == 0 {
        return Err(UsageError("--subjects and --per-subject must be positive".into()).into());
    }
    let spec = SyntheticSpec {
        subjects,
        images_per_subject: per_subject,
        train_per_subject: train_per_subject.unwrap_or(per_subject - per_subject / 4),
        first_identity: seed.wrapping_mul(10_000_000),
        resolution,
        ..Default::default()
    };
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let raw = spec.render::<f32>()?;
    let manifest = write_synthetic(&raw, out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(common: &Common, stage: Option<u8>, resume: Option<PathBuf>) -> Result<()> {
    let (cfg, text) = load_config(common)?;
    let dir = RunDir::create(&out_dir(&cfg, "runs/train"))?;
    let snapshot = match text {
        Some(t) => t,
        None => config::render(&cfg)?,
    };
    std::fs::write(dir.root.join("config.toml"), snapshot)?;
    std::fs::write(dir.root.join("config.resolved.toml"), config::render(&cfg)?)?;

    let mut prep = prepare::<f32>(&cfg, &mut |m| log(m))?;
    let mut state = match stage {
        None | Some(1) => TrainState::new(cfg.arch(), cfg.ablation, cfg.stages.clone(), cfg.train_options())?,
        Some(n @ (2 | 3)) => {
            let prev = Stage::from_number(n - 1)?;
            let path = resume.unwrap_or_else(|| dir.stage_checkpoint(prev));
            let (gens, tag) = GeneratorSet::<f32>::load(&path, Some(cfg.arch().d))
                .with_context(|| format!("loading {}", path.display()))?;
            if tag != prev {
                return Err(lbfti::Error::StageOrder(format!(
                    "--stage {n} needs a stage-{} checkpoint, {} is from stage {}",
                    prev.number(),
                    path.display(),
                    tag.number()
                ))
                .into());
            }
            log(&format!("resuming after stage {} from {}", prev.number(), path.display()));
            TrainState::resume(gens, prev, cfg.ablation, cfg.stages.clone(), cfg.train_options())?
        }
        Some(n) => return Err(UsageError(format!("--stage must be 1, 2 or 3, got {n}")).into()),
    };
    state = state.with_run_dir(dir.clone());
    for s in cfg.ablation.stages() {
        if state.completed.is_some_and(|c| c >= s) {
            continue;
        }
        log(&format!("stage {}", s.number()));
        state.run_stage(s, &prep.train, &mut prep.critics)?;
        for r in state.history.iter().filter(|r| r.stage == s) {
            log(&format!("  epoch {:>3} {:<12} loss {:.5}", r.epoch, r.generator, r.loss));
        }
    }
    let unseen = prep.unseen_refs();
    let report = evaluate_generators("test split", &state.generators, &prep.test, &prep.critics, &unseen, &cfg.eval)?;
    report.save(&dir.root.join("eval.json"))?;
    print!("{}", report.render());
    println!("run directory: {}", dir.root.display());
    Ok(())
}

fn cmd_extract(common: &Common, images: &Path, templates: &Path) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let e = resolve_extractor::<f32>(&cfg.extractor, ExtractorRole::Target, cfg.resolution, &mut |m| log(m))?
        .context("target extractor unavailable")?;
    let raw = load_manifest_samples::<f32>(images)?;
    let imgs: Vec<FaceImage<f32>> = raw.iter().map(|r| r.image.clone()).collect();
    let ts = extract_all(e.as_ref(), &imgs)?;
    let recs: Vec<TemplateRecord> = raw.iter().zip(&ts).map(|(r, t)| TemplateRecord::encode(&r.id, t)).collect();
    write_jsonl(templates, &recs)?;
    println!("{} templates -> {}", recs.len(), templates.display());
    Ok(())
}

fn cmd_invert(
    checkpoint: &Path,
    templates: Option<&Path>,
    images: Option<&Path>,
    config_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (gens, _) = GeneratorSet::<f32>::load(checkpoint, None)?;
    std::fs::create_dir_all(out)?;
    let (ids, ts, originals): (Vec<String>, Vec<FacialTemplate<f32>>, Option<Vec<FaceImage<f32>>>) =
        match (templates, images) {
            (Some(tp), _) => {
                let recs: Vec<TemplateRecord> = read_jsonl(tp)?;
                let ts = recs.iter().map(|r| r.decode::<f32>()).collect::<lbfti::Result<Vec<_>>>()?;
                (recs.into_iter().map(|r| r.id).collect(), ts, None)
            }
            (None, Some(ip)) => {
                let common = Common {
                    config: config_path.map(Path::to_path_buf),
                    seed: None,
                    out: None,
                    resolution: None,
                };
                let (cfg, _) = load_config(&common)?;
                let e = resolve_extractor::<f32>(&cfg.extractor, ExtractorRole::Target, cfg.resolution, &mut |m| log(m))?
                    .context("target extractor unavailable")?;
                let raw = load_manifest_samples::<f32>(ip)?;
                let imgs: Vec<FaceImage<f32>> = raw.iter().map(|r| r.image.clone()).collect();
                let ts = extract_all(e.as_ref(), &imgs)?;
                (raw.into_iter().map(|r| r.id).collect(), ts, Some(imgs))
            }
            (None, None) => return Err(UsageError("one of --templates or --images is required".into()).into()),
        };
    let mut recon = Vec::with_capacity(ts.len());
    for (id, t) in ids.iter().zip(&ts) {
        let x = gens.reconstruct_one(t)?;
        save_image(&x, &out.join(format!("{id}.png")))?;
        recon.push(x);
    }
    if let Some(orig) = originals {
        let rows: Vec<Vec<&FaceImage<f32>>> = orig.iter().zip(&recon).take(16).map(|(a, b)| vec![a, b]).collect();
        save_grid(&rows, &out.join("grid.png"))?;
    }
    println!("{} reconstructions -> {}", recon.len(), out.display());
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let (gens, _) = GeneratorSet::<f32>::load(checkpoint, Some(cfg.extractor.template_dim()))?;
    let prep = prepare::<f32>(&cfg, &mut |m| log(m))?;
    let recon = reconstruct_all(&gens, &prep.test)?;
    let mut extractors = vec![prep.critics.extractor.as_ref()];
    extractors.extend(prep.unseen_refs());
    let report = lbfti::evaluation::evaluate(
        &format!("{} on the test split", checkpoint.display()),
        &recon,
        &prep.test,
        &extractors,
        prep.skipped.clone(),
        Some(prep.critics.features.as_ref()),
        &cfg.eval,
    )?;
    let dir = out_dir(&cfg, "runs/eval");
    report.save(&dir.join("eval.json"))?;
    print!("{}", report.render());
    Ok(())
}

fn render_ablation(rows: &[AblationResult]) -> String {
    let mut s = format!(
        "{:<4} {:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "row", "F M S2 FT S3", "I@1%", "I@0.1%", "II@1%", "II@0.1%", "FAPD", "FAPC"
    );
    let mark = |b: bool| if b { "✓" } else { "✗" };
    for r in rows {
        let f = r.flags;
        let flags = format!("{} {} {} {} {}", mark(f.f_s1), mark(f.m_s1), mark(f.s2), mark(f.ft_s2), mark(f.s3));
        let e = &r.report.extractors[0];
        let tar = |p, far| e.tar(p, far).map_or("-".into(), |v| format!("{v:.4}"));
        let opt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.4}"));
        use lbfti::evaluation::Protocol::*;
        s.push_str(&format!(
            "{:<4} {:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            r.row,
            flags,
            tar(Type1, 0.01),
            tar(Type1, 0.001),
            tar(Type2, 0.01),
            tar(Type2, 0.001),
            opt(r.report.fapd),
            opt(r.report.fapc)
        ));
    }
    s
}

fn cmd_ablate(common: &Common) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let dir = out_dir(&cfg, "runs/ablate");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.resolved.toml"), config::render(&cfg)?)?;
    let Prepared {
        train,
        test,
        mut critics,
        unseen,
        ..
    } = prepare::<f32>(&cfg, &mut |m| log(m))?;
    let unseen: Vec<&dyn TemplateExtractor<f32>> = unseen.iter().map(|e| e.as_ref()).collect();
    let setup = AblationSetup {
        arch: cfg.arch(),
        stages: cfg.stages.clone(),
        options: cfg.train_options(),
        train: &train,
        test: &test,
        unseen: &unseen,
        eval: cfg.eval.clone(),
    };
    let rows = run_ablation_suite(&setup, &mut critics, log)?;
    std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{}", render_ablation(&rows));
    Ok(())
}

fn cmd_report(file: &Path) -> Result<()> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
        print!("{}", r.render());
    } else if let Ok(rows) = serde_json::from_str::<Vec<AblationResult>>(&text) {
        print!("{}", render_ablation(&rows));
    } else {
        bail!(lbfti::Error::Format {
            module: file.display().to_string(),
            detail: "neither an evaluation report nor ablation results".into(),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new().num_threads(1).build_global()?;
    }
    match cli.command {
        Command::Synth {
            subjects,
            per_subject,
            train_per_subject,
            out,
            seed,
            resolution,
        } => cmd_synth(subjects, per_subject, train_per_subject, &out, seed, resolution),
        Command::Train { common, stage, resume } => cmd_train(&common, stage, resume),
        Command::Extract {
            common,
            images,
            templates,
        } => cmd_extract(&common, &images, &templates),
        Command::Invert {
            checkpoint,
            templates,
            images,
            config,
            out,
        } => cmd_invert(&checkpoint, templates.as_deref(), images.as_deref(), config.as_deref(), &out),
        Command::Eval { common, checkpoint } => cmd_eval(&common, &checkpoint),
        Command::Ablate { common } => cmd_ablate(&common),
        Command::Report { file } => cmd_report(&file),
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || matches!(c.downcast_ref::<lbfti::Error>(), Some(lbfti::Error::Config { .. }))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
