//! Synthetic data, end-to-end pipeline, evaluation and self-test.

pub mod config;
pub mod contour;
pub mod eval;
pub mod pipeline;
pub mod selftest;
pub mod shapes;
pub mod synth;

pub use config::{FineWeighting, PipelineConfig, Weighting};
pub use eval::{evaluate, EvalReport, SampleResult};
pub use pipeline::{run_pipeline, PipelineOutput, PipelineWeights};
pub use synth::{synth_dataset, Manifest, SampleRecord};
