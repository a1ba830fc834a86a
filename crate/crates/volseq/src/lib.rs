//! Longitudinal 3D volume sequence classification.
//!
//! `volseq` models a patient record — an irregularly spaced sequence of 3D
//! imaging visits — and predicts a binary outcome at the next examination.
//! Spatial features come from a 3D ConvNeXt-style backbone, temporal
//! structure from a Pre-LN transformer encoder with time-interval positional
//! encodings. Both stages are pre-trained self-supervised (DINO-style
//! self-distillation for the backbone, sequence-order prediction for the
//! encoder) before class-balanced fine-tuning.
//!
//! Everything runs on the CPU in pure Rust, with hand-written forward and
//! backward passes over a named parameter store. Synthetic cohorts make the
//! whole pipeline runnable at desk scale; see the `examples/` directory for
//! one runnable program per capability and [`cli`] for the command-line
//! pipeline driver.

pub mod augment;
pub mod backbone;
pub mod cli;
pub mod encoder;
pub mod metrics;
pub mod nn;
pub mod numcheck;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod store;
pub mod train;
pub mod volumes;

pub use backbone::{Backbone, BackboneConfig, Variant};

pub use store::{GradStore, ParameterStore};
pub use volumes::{LabeledSequence, PatientRecord, StudyVisit, SyntheticConfig, Volume};
