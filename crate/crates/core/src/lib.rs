//! Layered facial template inversion: synthetic faces with ground-truth
//! component masks, template extractors, layer/panorama generators, staged
//! training with ablation switches, and verification metrics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod error;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod domain;
pub mod evaluation;
pub mod experiment;
pub mod extractor;
pub mod generators;
pub mod io;
pub mod losses;
pub mod masks;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type FaceImage32 = domain::FaceImage<f32>;
pub type FaceImage64 = domain::FaceImage<f64>;
pub type Template32 = domain::FacialTemplate<f32>;
pub type Template64 = domain::FacialTemplate<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type GeneratorSet32 = generators::GeneratorSet<f32>;
pub type GeneratorSet64 = generators::GeneratorSet<f64>;
pub type ToyExtractor32 = extractor::ToyExtractor<f32>;
pub type ToyExtractor64 = extractor::ToyExtractor<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
