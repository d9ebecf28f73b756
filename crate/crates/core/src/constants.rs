//! Default hyperparameters shared across modules.

/// Attention positions per query.
pub const NUM_OFFSETS: usize = 18;
/// Base of the temporal embedding frequency ladder.
pub const TEMPORAL_EPSILON: f64 = 8.0;
/// Weight of the field loss in the combined objective.
pub const FIELD_LOSS_WEIGHT: f64 = 0.05;
/// Weight of the offset loss in the combined objective.
pub const OFFSET_LOSS_WEIGHT: f64 = 0.05;
pub const ATTENTION_LAYERS: usize = 2;
pub const ATTENTION_HEADS: usize = 4;
/// Pillar grid cell size in meters.
pub const BASE_CELL_SIZE: f64 = 0.4;
/// Backbone downsampling factor; feature cells are `BASE_CELL_SIZE * FEATURE_STRIDE`.
pub const FEATURE_STRIDE: usize = 4;
/// Evaluation latency grid in milliseconds.
pub const LATENCIES_MS: [u32; 5] = [0, 100, 200, 300, 400];
pub const EGO_FRAMES: usize = 2;
pub const COOP_FRAMES: usize = 4;
/// Upper bound of uniform latency augmentation.
pub const TRAIN_LATENCY_MAX_MS: u32 = 400;

pub const SINKHORN_EPSILON: f64 = 0.1;
pub const SINKHORN_MAX_ITERS: usize = 200;
pub const SINKHORN_TOLERANCE: f64 = 1e-9;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
/// Heatmap kernel width in feature cells.
pub const HEATMAP_SIGMA_CELLS: f64 = 1.0;

pub const NMS_IOU: f64 = 0.5;
pub const SCORE_THRESHOLD: f64 = 0.1;

pub const FEATURE_CHANNELS: usize = 32;
pub const ENCODER_CHANNELS: usize = 16;
pub const UNET_DEPTH: usize = 3;
pub const UNET_WIDTH: usize = 32;

/// Feature cell size in meters.
pub fn feature_cell_size() -> f64 {
    BASE_CELL_SIZE * FEATURE_STRIDE as f64
}
