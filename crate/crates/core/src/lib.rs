//! Context-aware machine translation with LLMs: conversation corpora, prompt
//! construction, backends, quality-aware decoding, metrics, discourse
//! phenomenon tagging, context analysis and experiment orchestration.

pub mod analysis;
pub mod backend;
pub mod corpus;
pub mod decoder;
pub mod evalharness;
pub mod metrics;
pub mod muda;
pub mod promptkit;
pub mod scalar;
pub mod transport;

pub use scalar::Scalar;

pub type UtilityMatrixF32 = decoder::UtilityMatrix<f32>;
pub type UtilityMatrixF64 = decoder::UtilityMatrix<f64>;
pub type MbrSelectionF32 = decoder::MbrSelection<f32>;
pub type MbrSelectionF64 = decoder::MbrSelection<f64>;
