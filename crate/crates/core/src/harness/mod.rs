//! Experiment driver: pipeline runs, metrics, sweeps, fixtures and rendering.

pub mod fixtures;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod sweep;

pub use metrics::{average_precision, evaluate_frames, ApResult, FrameEval, PrPoint};
pub use model::ModelParams;
pub use pipeline::{run_pipeline, EncodedScenario, EvalResult, Mode, PipelineConfig, PipelineRun, Runner};
pub use sweep::{latency_sweep, sweep_csv, write_sweep_csv, SweepRow};
