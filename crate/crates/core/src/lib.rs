pub mod cli;
pub mod config;
pub mod container;
pub mod diffcore;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod formant;
pub mod gradsuite;
pub mod perceploss;
pub mod scalar;
pub mod training;
pub mod vqvae;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type VqvaeF32 = vqvae::HierarchicalVqvae<f32>;
pub type VqvaeF64 = vqvae::HierarchicalVqvae<f64>;
pub type FormantRegressorF32 = formant::FormantRegressor<f32>;
pub type FormantRegressorF64 = formant::FormantRegressor<f64>;
pub type QualityProxyF32 = perceploss::QualityProxy<f32>;
pub type QualityProxyF64 = perceploss::QualityProxy<f64>;
pub type PhonemeProxyF32 = perceploss::PhonemeProxy<f32>;
pub type PhonemeProxyF64 = perceploss::PhonemeProxy<f64>;
pub type TensorF32 = diffcore::Tensor<f32>;
pub type TensorF64 = diffcore::Tensor<f64>;
