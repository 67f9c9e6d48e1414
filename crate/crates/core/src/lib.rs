//! Two-stage self-training pipeline for 3-class glaucoma grading on OCT
//! B-scans under source→target domain shift.
//!
//! The crate covers the full experiment loop: data ingestion and a
//! synthetic B-scan generator, patient-level splitting, the RAGNet_v2
//! encoder and its VGG baselines, cross-entropy/Adadelta training,
//! pseudo-labeling, micro-averaged evaluation, class-activation maps and
//! an end-to-end experiment runner.
//!
//! Numerical code is generic over the scalar type ([`scalar::Scalar`]);
//! [`scalar::Real`] (`f32`) is the default precision and
//! [`scalar::CheckReal`] (`f64`) backs the gradient checker.

pub mod dataset;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod orchestrate;
pub mod pseudolabel;
pub mod scalar;
pub mod splits;
pub mod tensor;
pub mod train;

pub use scalar::{CheckReal, Real, Scalar};
