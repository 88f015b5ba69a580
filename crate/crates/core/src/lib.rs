//! Training-free audio-visual sound source localization driven by a
//! multimodal language model.

pub mod client;
pub mod dataset;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod schemas;

pub use geometry::{iou, BoundingBox, ImageDims, RefinementOp};
pub use pipeline::{Pipeline, PipelineConfig, SampleResult};
