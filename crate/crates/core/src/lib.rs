//! Head-aware visual cropping.
//!
//! Stage one profiles attention heads on an OCR diagnostic corpus and keeps
//! the heads whose attention peaks land on the text being read
//! ([`profiler`]). Stage two refines those heads per query by spatial
//! concentration and gradient sensitivity, fuses the top K into a guidance
//! map, and extracts a crop box from it ([`guidance`], [`spatial`]).
//!
//! Inputs travel as `.hvm` manifests and `.hvt` tensors ([`manifest`],
//! [`tensor`]); [`synth`] generates corpora and scenes with planted ground
//! truth, and [`bench`] runs the ablation ladder and parameter sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod guidance;
pub mod manifest;
pub mod pixmap;
pub mod profiler;
pub mod records;
pub mod report;
pub mod spatial;
pub mod synth;
pub mod tensor;

pub use guidance::{run_pipeline, GuidanceParams, GuidanceResult};
pub use profiler::{ExpertHeadSet, HeadScoreMatrix};
pub use records::{HeadId, InferenceRecord, ModelGeometry};
pub use tensor::Tensor;
