//! Latency-robust cooperative perception on bird's-eye-view feature maps.
//!
//! The crate simulates multi-agent LiDAR scenes with inter-agent latency and
//! runs an alignment pipeline over them: pillar encoding, per-agent feature
//! caches with temporal embeddings, trajectory fields, trajectory-aware
//! attention with Sinkhorn-matched offsets, inter-agent fusion and
//! AP evaluation under latency sweeps.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`geometry`] | SE(2) poses, grids, feature-map warping, rotated IoU |
//! | [`simkit`] | scenario config, frame generation, delayed delivery |
//! | [`pillars`] | pillarization, point encoder, dense backbone |
//! | [`temporal`] | agent caches, temporal embedding, history assembly |
//! | [`trajfield`] | trajectory ground truth, rasterization, field predictor, field loss |
//! | [`offsets`] | ground-truth offsets, offset generator, Sinkhorn, offset loss |
//! | [`attention`] | response gathering, multi-head attention, alignment stack |
//! | [`fusion`] | agent fusion, detection head, losses |
//! | [`harness`] | metrics, pipeline, latency sweeps, IO, rendering |
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example` lists them.

pub mod attention;
pub mod constants;
pub mod error;
pub mod feature;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod offsets;
pub mod params;
pub mod pillars;
pub mod simkit;
pub mod temporal;
pub mod trajfield;

pub use error::{Error, Result};
pub use feature::{FeatureMap, FrameId};
pub use geometry::{GridSpec, OrientedBox, Pose2};
