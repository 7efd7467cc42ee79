//! Cross-domain semantic segmentation with point supervision chosen by
//! entropy-ranked active selection.
//!
//! Pipeline: adversarial entropy-map adaptation ([`uda`]) produces target
//! prediction and entropy maps; [`acquisition`] ranks grid patches by mean
//! entropy and asks an oracle for a few points in the top patches; [`weak`]
//! retrains on source labels plus the merged weak target labels; [`eval`]
//! scores the result. [`pipeline`] runs whole experiment plans.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod acquisition;
pub mod config;
pub mod container;
pub mod data;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod pngio;
pub mod scalar;
pub mod uda;
pub mod weak;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ProbMapF32 = data::ProbMap<f32>;
pub type ProbMapF64 = data::ProbMap<f64>;
pub type EntropyMapF32 = data::EntropyMap<f32>;
pub type EntropyMapF64 = data::EntropyMap<f64>;
pub type SegNetF32 = nn::SegNet<f32>;
pub type SegNetF64 = nn::SegNet<f64>;
pub type DiscriminatorF32 = nn::Discriminator<f32>;
pub type DiscriminatorF64 = nn::Discriminator<f64>;
