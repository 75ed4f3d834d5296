//! Small fixtures shared by the integration tests: 32×32 faces, narrow
//! networks, few subjects.
#![allow(dead_code)]

use lbfti::data::{build_datasets, Dataset, SyntheticSpec};
use lbfti::extractor::{ToyExtractor, ToyExtractorArch};
use lbfti::generators::{GeneratorArch, LayerSchedule, PanoSchedule};
use lbfti::losses::{AttributeNetConfig, RandomAttributeNet, TapNet, TapNetConfig};
use lbfti::training::{Critics, StageConfig, StageConfigs};
use lbfti::Scalar;

pub const SIDE: usize = 32;
pub const D: usize = 16;

pub fn tiny_extractor_arch() -> ToyExtractorArch {
    ToyExtractorArch {
        d: D,
        channels: vec![4, 8, 8],
    }
}

pub fn tiny_extractor<T: Scalar>(seed: u64) -> ToyExtractor<T> {
    ToyExtractor::new("tiny", tiny_extractor_arch(), seed).unwrap()
}

pub fn tiny_arch() -> GeneratorArch {
    GeneratorArch {
        d: D,
        resolution: SIDE,
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
    }
}

pub fn tiny_critics<T: Scalar>(seed: u64) -> Critics<T> {
    Critics {
        extractor: Box::new(tiny_extractor(seed)),
        features: Box::new(TapNet::new(&TapNetConfig {
            channels: vec![4, 4, 4],
            seed: 3,
        })),
        attributes: Box::new(RandomAttributeNet::new(&AttributeNetConfig {
            channels: vec![4, 4],
            seed: 5,
        })),
    }
}

pub fn tiny_spec(subjects: usize, per_subject: usize, train_per_subject: usize) -> SyntheticSpec {
    SyntheticSpec {
        subjects,
        images_per_subject: per_subject,
        train_per_subject,
        first_identity: 40,
        resolution: SIDE,
        ..SyntheticSpec::default()
    }
}

/// Train/test splits templated by an untrained tiny extractor.
pub fn tiny_data<T: Scalar>(subjects: usize, per_subject: usize, train_per_subject: usize) -> (Dataset<T>, Dataset<T>) {
    let raw = tiny_spec(subjects, per_subject, train_per_subject).render::<T>().unwrap();
    build_datasets(raw, &tiny_extractor::<T>(9)).unwrap()
}

pub fn tiny_stages(epochs: usize) -> StageConfigs {
    let s = |lr: f64| StageConfig {
        epochs,
        learning_rate: lr,
        batch_size: 4,
        loss_weights: None,
    };
    StageConfigs {
        stage1: s(2e-3),
        stage2: s(2e-3),
        stage3: s(1e-3),
    }
}
