use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lbfti::experiment::{ExperimentConfig, ExtractorConfig, ExtractorPool};
use lbfti::extractor::{ExtractorTrainConfig, ToyExtractorArch};
use lbfti::generators::{GeneratorArch, LayerSchedule, PanoSchedule};
use lbfti::losses::{AttributeNetConfig, TapNetConfig};
use lbfti::training::StageConfig;

fn lbfti(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbfti")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig {
        resolution: 32,
        out: Some(dir.join("run")),
        ..Default::default()
    };
    cfg.data.synthetic.subjects = 4;
    cfg.data.synthetic.images_per_subject = 4;
    cfg.data.synthetic.train_per_subject = 2;
    cfg.extractor = ExtractorConfig::Toy {
        name: "tiny".into(),
        arch: ToyExtractorArch {
            d: 16,
            channels: vec![4, 8, 8],
        },
        checkpoint: Some(dir.join("extractor.tar")),
        pool: ExtractorPool {
            subjects: 4,
            images_per_subject: 2,
            first_identity: 900,
        },
        train: ExtractorTrainConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        },
    };
    cfg.generators.arch = Some(GeneratorArch {
        d: 16,
        resolution: 32,
        layer: LayerSchedule {
            c0: 8,
            blocks: vec![8, 4],
        },
        panorama: PanoSchedule {
            encoder: vec![4, 8, 8],
            template_channels: 4,
            fusion: 8,
            decoder: vec![8, 4, 4],
        },
        out_gain: 0.5,
    });
    let stage = StageConfig {
        epochs: 1,
        learning_rate: 1e-3,
        batch_size: 4,
        loss_weights: None,
    };
    cfg.stages.stage1 = stage.clone();
    cfg.stages.stage2 = stage.clone();
    cfg.stages.stage3 = stage;
    cfg.critics.features = TapNetConfig {
        channels: vec![4, 4, 4],
        seed: 3,
    };
    cfg.critics.attributes = AttributeNetConfig {
        channels: vec![4, 4],
        seed: 5,
    };
    let path = dir.join("tiny.toml");
    std::fs::write(&path, toml::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn synth_writes_the_requested_counts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = lbfti(&["synth", "--subjects", "3", "--per-subject", "4", "--resolution", "32", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ma = lines(&a.join("manifest.jsonl"));
    assert_eq!(ma, lines(&b.join("manifest.jsonl")));
    assert_eq!(ma.len(), 12);
    let pngs = |d: &Path| {
        let mut v: Vec<_> = walk(d).into_iter().filter(|p| p.extension().is_some_and(|e| e == "png")).collect();
        v.sort();
        v
    };
    let (pa, pb) = (pngs(&a), pngs(&b));
    // one image and one mask sidecar per face
    assert_eq!(pa.len(), 24);
    assert_eq!(pa.iter().filter(|p| p.to_string_lossy().ends_with(".mask.png")).count(), 12);
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

fn walk(d: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = lbfti(&["synth", "--subjects", "0", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[stages.stage1]\nepochs = 2\nlearning_rte = 0.1\n").unwrap();
    let o = lbfti(&["train", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stages.stage1"), "{}", stderr(&o));

    let neg = dir.path().join("neg.toml");
    std::fs::write(&neg, "[stages.stage2]\nepochs = 0\nlearning_rate = 0.1\nbatch_size = 4\n").unwrap();
    let o = lbfti(&["train", "--config", s(&neg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn shipped_toy_config_matches_the_builtin_one() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let text = std::fs::read_to_string(path).unwrap();
    let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
    cfg.validate().unwrap();
    let mut builtin = ExperimentConfig::toy();
    builtin.extractor = cfg.extractor.clone();
    builtin.out = cfg.out.clone();
    assert_eq!(cfg, builtin);
}

#[test]
fn train_invert_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);

    let o = lbfti(&["--deterministic", "train", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = d.join("run");
    let ckpt = run.join("checkpoints/stage3.tar");
    assert!(ckpt.exists(), "{:?}", walk(&run));
    assert!(d.join("extractor.tar").exists());
    assert!(run.join("eval.json").exists());
    assert!(!lines(&run.join("metrics.jsonl")).is_empty());

    // templates from a fresh manifest
    let imgs = d.join("imgs");
    let o = lbfti(&["synth", "--subjects", "5", "--per-subject", "2", "--resolution", "32", "--seed", "7", "--out", s(&imgs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let templates = d.join("templates.jsonl");
    let o = lbfti(&["extract", "--config", s(&cfg), "--images", s(&imgs.join("manifest.jsonl")), "--templates", s(&templates)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = lines(&templates);
    assert_eq!(recs.len(), 10);

    // the same template twice gives the same image
    let dup = d.join("dup.jsonl");
    let first: serde_json::Value = serde_json::from_str(&recs[0]).unwrap();
    let mut again = first.clone();
    again["id"] = "again".into();
    let mut all = recs.clone();
    all.push(again.to_string());
    std::fs::write(&dup, all.join("\n") + "\n").unwrap();
    let out = d.join("recon");
    let o = lbfti(&["invert", "--checkpoint", s(&ckpt), "--templates", s(&dup), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(walk(&out).len(), 11);
    let id0 = first["id"].as_str().unwrap();
    assert_eq!(
        std::fs::read(out.join(format!("{id0}.png"))).unwrap(),
        std::fs::read(out.join("again.png")).unwrap()
    );

    // from images, with the comparison grid
    let out2 = d.join("recon2");
    let o = lbfti(&["invert", "--checkpoint", s(&ckpt), "--images", s(&imgs.join("manifest.jsonl")), "--config", s(&cfg), "--out", s(&out2)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out2.join("grid.png").exists());

    let o = lbfti(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&d.join("ev"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = lbfti(&["report", s(&d.join("ev/eval.json"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("I@1%"));

    // resuming stage 3 from the stage-2 checkpoint
    let o = lbfti(&["train", "--config", s(&cfg), "--stage", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    // a stage-3 checkpoint is the wrong resume point for stage 2
    let o = lbfti(&["train", "--config", s(&cfg), "--stage", "2", "--resume", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(1));

    let bad = d.join("bad.tar");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = lbfti(&["invert", "--checkpoint", s(&bad), "--templates", s(&templates), "--out", s(&d.join("x"))]);
    assert!(!o.status.success());
    let o = lbfti(&["report", s(&cfg)]);
    assert!(!o.status.success());
}
