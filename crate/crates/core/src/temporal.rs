//! Per-agent feature caches, sinusoidal temporal embeddings and history
//! assembly in the ego frame.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;

use crate::constants::TEMPORAL_EPSILON;
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, FrameId};
use crate::geometry::{compose, warp_into_grid, GridSpec, Pose2};
use crate::nn::{normal_matrix, Conv2d};

/// Fixed-capacity, time-ordered buffer of raw feature maps (newest last).
#[derive(Debug, Clone)]
pub struct AgentCache {
    pub agent_id: String,
    capacity: usize,
    entries: VecDeque<FeatureMap>,
}

impl AgentCache {
    pub fn new(agent_id: impl Into<String>, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("cache capacity must be >= 1".into()));
        }
        Ok(Self {
            agent_id: agent_id.into(),
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends `f`, evicting the oldest entry at capacity. Returns the evicted map.
    pub fn insert(&mut self, f: FeatureMap) -> Result<Option<FeatureMap>> {
        if let Some(newest) = self.entries.back() {
            if f.timestamp_us <= newest.timestamp_us {
                return Err(Error::StaleEntry {
                    timestamp_us: f.timestamp_us,
                    newest_us: newest.timestamp_us,
                });
            }
        }
        let evicted = if self.entries.len() == self.capacity {
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(f);
        Ok(evicted)
    }

    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &FeatureMap> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&FeatureMap> {
        self.entries.back()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.entries.iter().map(|f| f.timestamp_us).collect()
    }
}

/// Argument of the `j`-th sin/cos pair: `tau / eps^(2j / C)`.
pub fn te_argument(tau: f64, j: usize, channels: usize) -> f64 {
    tau / TEMPORAL_EPSILON.powf(2.0 * j as f64 / channels as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalEmbedding {
    pub tau: f64,
    pub values: Array1<f64>,
}

impl TemporalEmbedding {
    pub fn channels(&self) -> usize {
        self.values.len()
    }

    /// Broadcast over an `h x w` grid.
    pub fn broadcast(&self, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((self.values.len(), h, w), |(k, _, _)| self.values[k])
    }
}

pub fn temporal_embed(tau: f64, channels: usize) -> Result<TemporalEmbedding> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::Config(format!("temporal embedding needs even C, got {channels}")));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temporal delay must be finite and >= 0, got {tau}")));
    }
    let mut values = Array1::zeros(channels);
    for j in 0..channels / 2 {
        let (s, c) = te_argument(tau, j, channels).sin_cos();
        values[2 * j] = s;
        values[2 * j + 1] = c;
    }
    Ok(TemporalEmbedding { tau, values })
}

/// Whole frames between a capture at `ts_us` and `t_us`, rounded up.
pub fn frames_behind(t_us: i64, ts_us: i64, period_us: i64) -> f64 {
    let d = (t_us - ts_us).max(0);
    ((d + period_us - 1) / period_us) as f64
}

/// 1x1 map from `[features | TE]` (2C) back to C channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFusionParams {
    pub conv: Conv2d,
}

impl TemporalFusionParams {
    /// `[I | 0]`
    pub fn identity(channels: usize) -> Self {
        let mut m = Array2::zeros((channels, 2 * channels));
        for k in 0..channels {
            m[[k, k]] = 1.0;
        }
        Self {
            conv: Conv2d::pointwise(&m, Array1::zeros(channels)),
        }
    }

    /// `[I | scale * I]`: features plus a scaled copy of the embedding.
    pub fn additive(channels: usize, scale: f64) -> Self {
        let mut p = Self::identity(channels);
        for k in 0..channels {
            p.conv.weight[[k, channels + k, 0, 0]] = scale;
        }
        p
    }

    /// Identity on features plus small random weights on the TE block.
    pub fn seeded<R: Rng + ?Sized>(channels: usize, te_std: f64, rng: &mut R) -> Self {
        let mut p = Self::identity(channels);
        let te = normal_matrix(channels, channels, te_std, rng);
        for k in 0..channels {
            for j in 0..channels {
                p.conv.weight[[k, channels + j, 0, 0]] = te[[k, j]];
            }
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.conv.out_channels()
    }
}

pub fn fuse_temporal(
    f: &FeatureMap,
    te: &TemporalEmbedding,
    params: &TemporalFusionParams,
) -> Result<FeatureMap> {
    let c = f.channels();
    if te.channels() != c || params.conv.in_channels() != 2 * c {
        return Err(Error::Shape(format!(
            "temporal fusion: features {c}, embedding {}, params expect {}",
            te.channels(),
            params.conv.in_channels()
        )));
    }
    let conv = &params.conv;
    let cout = conv.out_channels();
    let (_, h, w) = f.data.dim();
    // the TE block is spatially constant, so it folds into a per-channel bias
    let mut bias = conv.bias.clone();
    for o in 0..cout {
        for j in 0..c {
            bias[o] += conv.weight[[o, c + j, 0, 0]] * te.values[j];
        }
    }
    let feat_w = conv.weight.slice(s![.., ..c, .., ..]).to_owned();
    let feature_conv = Conv2d {
        weight: feat_w,
        bias,
        stride: 1,
        padding: 0,
    };
    let data = feature_conv.forward(&f.data.view())?;
    debug_assert_eq!(data.dim(), (cout, h, w));
    Ok(f.with_data(data))
}

/// Temporally fused history warped into the ego frame at `t_us`, oldest first.
#[derive(Debug, Clone)]
pub struct AssembledHistory {
    pub maps: Vec<FeatureMap>,
    /// Frames behind the newest ego frame, per map.
    pub taus: Vec<f64>,
    pub source_timestamps: Vec<i64>,
}

pub struct HistoryContext<'a> {
    pub ego_pose_at_t: Pose2,
    pub t_us: i64,
    /// Newest ego frame time used as the TE reference.
    pub reference_us: i64,
    pub period_us: i64,
    pub grid: &'a GridSpec,
    pub ego_id: &'a str,
}

pub fn assemble_history(
    cache: &AgentCache,
    ctx: &HistoryContext<'_>,
    pose_of: impl Fn(i64) -> Option<Pose2>,
    params: &TemporalFusionParams,
) -> Result<AssembledHistory> {
    if cache.is_empty() {
        return Err(Error::Empty(format!("cache of {}", cache.agent_id)));
    }
    let to_ego = ctx.ego_pose_at_t.inverse();
    let mut out = AssembledHistory {
        maps: Vec::with_capacity(cache.len()),
        taus: Vec::with_capacity(cache.len()),
        source_timestamps: Vec::with_capacity(cache.len()),
    };
    for entry in cache.entries() {
        let pose = pose_of(entry.timestamp_us).ok_or(Error::MissingPose {
            timestamp_us: entry.timestamp_us,
        })?;
        let tau = frames_behind(ctx.reference_us, entry.timestamp_us, ctx.period_us);
        let te = temporal_embed(tau, entry.channels())?;
        let fused = fuse_temporal(entry, &te, params)?;
        let rel = compose(&to_ego, &pose);
        let warped = warp_into_grid(&fused, &rel, ctx.grid, FrameId::new(ctx.ego_id, ctx.t_us));
        out.maps.push(warped);
        out.taus.push(tau);
        out.source_timestamps.push(entry.timestamp_us);
    }
    Ok(out)
}

/// Mean over the assembled history: the per-agent attention input.
pub fn collapse(history: &AssembledHistory) -> Result<FeatureMap> {
    let first = history
        .maps
        .first()
        .ok_or_else(|| Error::Empty("history".into()))?;
    let mut acc = first.data.clone();
    for m in &history.maps[1..] {
        if m.data.dim() != acc.dim() {
            return Err(Error::Shape("history maps differ in shape".into()));
        }
        acc += &m.data;
    }
    acc /= history.maps.len() as f64;
    Ok(first.with_data(acc))
}

/// `[newest | mean history]` channel stack fed to the field predictor.
pub fn history_stack(history: &AssembledHistory) -> Result<Array3<f64>> {
    let newest = history
        .maps
        .last()
        .ok_or_else(|| Error::Empty("history".into()))?;
    let mean = collapse(history)?;
    crate::nn::concat_channels(&[newest.data.view(), mean.data.view()])
}
