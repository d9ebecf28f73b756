//! Multi-agent fusion, the center-score detection head and the combined loss.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constants::{FIELD_LOSS_WEIGHT, HEATMAP_SIGMA_CELLS, NMS_IOU, OFFSET_LOSS_WEIGHT, SCORE_THRESHOLD};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::geometry::{normalize_angle, rotated_iou, GridSpec, OrientedBox};
use crate::nn::{sigmoid, Conv2d};
use crate::params::TensorBundle;
use crate::trajfield::focal_cell;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub score: f64,
}

/// One convolution over the agent-concatenated maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub conv: Conv2d,
}

impl FusionParams {
    /// `[w_0 I | w_1 I | ...]`
    pub fn weighted(channels: usize, weights: &[f64]) -> Self {
        let mut m = Array2::zeros((channels, channels * weights.len()));
        for (a, w) in weights.iter().enumerate() {
            for k in 0..channels {
                m[[k, a * channels + k]] = *w;
            }
        }
        Self {
            conv: Conv2d::pointwise(&m, Array1::zeros(channels)),
        }
    }

    /// Plain sum over agents.
    pub fn sum(channels: usize, agents: usize) -> Self {
        Self::weighted(channels, &vec![1.0; agents])
    }

    pub fn seeded<R: Rng + ?Sized>(channels: usize, agents: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::seeded(channels * agents, channels, 3, 1, rng),
        }
    }

    pub fn save_into(&self, bundle: &mut TensorBundle, prefix: &str) {
        bundle.insert_conv(&format!("{prefix}.conv"), &self.conv);
    }

    pub fn load_from(bundle: &TensorBundle, prefix: &str) -> Result<Self> {
        Ok(Self {
            conv: bundle.get_conv(&format!("{prefix}.conv"))?,
        })
    }
}

/// Concatenates `maps` in the given order (ego first) and convolves back to
/// `C` channels. The output keeps the first map's metadata.
pub fn fuse_agents(maps: &[FeatureMap], params: &FusionParams) -> Result<FeatureMap> {
    let first = maps.first().ok_or_else(|| Error::Empty("no maps to fuse".into()))?;
    for m in &maps[1..] {
        if !m.grid.same_layout(&first.grid) {
            return Err(Error::Shape(format!("grid of {} differs from {}", m.agent_id, first.agent_id)));
        }
        if m.channels() != first.channels() {
            return Err(Error::Shape(format!("{} has {} channels, expected {}", m.agent_id, m.channels(), first.channels())));
        }
    }
    let views: Vec<ArrayView3<f64>> = maps.iter().map(|m| m.data.view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let out = params.conv.forward(&stacked.view())?;
    Ok(first.with_data(out))
}

/// Head channels: score logit, dx, dy (cells), log l, log w, cos, sin.
pub const HEAD_CHANNELS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub conv: Conv2d,
}

impl DetectionHead {
    pub fn zeros(channels: usize) -> Self {
        Self {
            conv: Conv2d::zeros(channels, HEAD_CHANNELS, 1, 1),
        }
    }

    pub fn seeded<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut conv = Conv2d::seeded(channels, HEAD_CHANNELS, 1, 1, rng);
        conv.weight.mapv_inplace(|v| v * 0.01);
        conv.bias[0] = -2.19;
        Self { conv }
    }

    /// Analytic head: logit `gain * mean(channels) + bias`, fixed car extent, yaw 0.
    pub fn analytic(channels: usize, gain: f64, bias: f64, length: f64, width: f64) -> Self {
        let mut m = Array2::zeros((HEAD_CHANNELS, channels));
        m.row_mut(0).fill(gain / channels as f64);
        let b = Array1::from(vec![bias, 0.0, 0.0, length.ln(), width.ln(), 1.0, 0.0]);
        Self {
            conv: Conv2d::pointwise(&m, b),
        }
    }

    pub fn forward(&self, f: &FeatureMap) -> Result<Array3<f64>> {
        self.conv.forward(&f.data.view())
    }

    pub fn save_into(&self, bundle: &mut TensorBundle, prefix: &str) {
        bundle.insert_conv(&format!("{prefix}.conv"), &self.conv);
    }

    pub fn load_from(bundle: &TensorBundle, prefix: &str) -> Result<Self> {
        Ok(Self {
            conv: bundle.get_conv(&format!("{prefix}.conv"))?,
        })
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Regression targets of `b` at the cell containing its center.
pub fn encode_box(b: &OrientedBox, score: f64, grid: &GridSpec) -> Option<((usize, usize), [f64; HEAD_CHANNELS])> {
    let (r, c) = grid.cell_of(b.cx, b.cy)?;
    let center = grid.cell_center(r, c);
    Some((
        (r, c),
        [
            logit(score),
            (b.cx - center[0]) / grid.cell_size,
            (b.cy - center[1]) / grid.cell_size,
            b.length.ln(),
            b.width.ln(),
            b.yaw.cos(),
            b.yaw.sin(),
        ],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Shift centers to the vertex of a parabola fit of the logits around the peak.
    pub refine: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: SCORE_THRESHOLD,
            nms_iou: NMS_IOU,
            refine: false,
        }
    }
}

fn is_local_max(s: &Array2<f64>, r: usize, c: usize) -> bool {
    let (h, w) = s.dim();
    let v = s[[r, c]];
    let mut lower = false;
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                continue;
            }
            let n = s[[rr as usize, cc as usize]];
            let earlier = (rr, cc) < (r as i64, c as i64);
            if n > v || (earlier && n == v) {
                return false;
            }
            lower |= n < v;
        }
    }
    lower
}

/// Vertex of the parabola through three log-domain samples.
fn parabola_shift(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom >= -1e-12 {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

/// Boxes from raw head output: strict local maxima of the score above the
/// threshold, then greedy rotated NMS. Sorted by descending score.
pub fn decode_head_output(raw: &Array3<f64>, grid: &GridSpec, cfg: &DecodeConfig) -> Vec<Detection> {
    let (_, h, w) = raw.dim();
    let scores = Array2::from_shape_fn((h, w), |(r, c)| sigmoid(raw[[0, r, c]]));
    let mut dets = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let s = scores[[r, c]];
            if s < cfg.score_threshold || !is_local_max(&scores, r, c) {
                continue;
            }
            let (mut fr, mut fc) = (r as f64, c as f64);
            if cfg.refine {
                // logits are treated as log-scores
                let l = |rr: usize, cc: usize| raw[[0, rr, cc]];
                if r > 0 && r + 1 < h {
                    fr += parabola_shift(l(r - 1, c), l(r, c), l(r + 1, c));
                }
                if c > 0 && c + 1 < w {
                    fc += parabola_shift(l(r, c - 1), l(r, c), l(r, c + 1));
                }
            }
            let center = grid.world_of_continuous(fr, fc);
            let bbox = OrientedBox::new(
                center[0] + raw[[1, r, c]] * grid.cell_size,
                center[1] + raw[[2, r, c]] * grid.cell_size,
                normalize_angle(raw[[6, r, c]].atan2(raw[[5, r, c]])),
                raw[[3, r, c]].exp(),
                raw[[4, r, c]].exp(),
            );
            dets.push(Detection { bbox, score: s });
        }
    }
    nms(dets, cfg.nms_iou)
}

pub fn decode_detections(fused: &FeatureMap, head: &DetectionHead, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let raw = head.forward(fused)?;
    Ok(decode_head_output(&raw, &fused.grid, cfg))
}

/// Greedy NMS: keeps the best remaining box and drops those overlapping it by more than `iou`.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| rotated_iou(&k.bbox, &d.bbox) <= iou) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLoss {
    pub total: f64,
    pub heatmap: f64,
    pub regression: f64,
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Focal loss of the score against Gaussian center targets plus smooth-L1
/// regression at GT cells, both averaged over the number of boxes.
pub fn detection_loss(raw: &Array3<f64>, gts: &[OrientedBox], grid: &GridSpec) -> Result<DetectionLoss> {
    let (ch, h, w) = raw.dim();
    if ch != HEAD_CHANNELS || h != grid.height_cells || w != grid.width_cells {
        return Err(Error::Shape(format!("head output {:?} on a {h}x{w} grid", raw.dim())));
    }
    let encoded: Vec<_> = gts.iter().filter_map(|b| encode_box(b, 1.0, grid)).collect();
    let mut target = Array2::<f64>::zeros((h, w));
    let s2 = 2.0 * HEATMAP_SIGMA_CELLS * HEATMAP_SIGMA_CELLS;
    for ((gr, gc), _) in &encoded {
        for ((r, c), t) in target.indexed_iter_mut() {
            let d2 = (r as f64 - *gr as f64).powi(2) + (c as f64 - *gc as f64).powi(2);
            *t = t.max((-d2 / s2).exp());
        }
    }
    let norm = encoded.len().max(1) as f64;
    let heatmap = target
        .indexed_iter()
        .map(|((r, c), &y)| focal_cell(sigmoid(raw[[0, r, c]]), y).0)
        .sum::<f64>()
        / norm;
    let regression = encoded
        .iter()
        .map(|((r, c), t)| (1..HEAD_CHANNELS).map(|k| smooth_l1(raw[[k, *r, *c]] - t[k])).sum::<f64>())
        .sum::<f64>()
        / norm;
    Ok(DetectionLoss {
        total: heatmap + regression,
        heatmap,
        regression,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: FIELD_LOSS_WEIGHT,
            beta: OFFSET_LOSS_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub detection: f64,
    pub field: f64,
    pub offset: f64,
}

fn finite_mean(name: &str, vals: &[f64]) -> Result<f64> {
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} loss of agent {i}")));
    }
    Ok(if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 })
}

/// `det + alpha * mean(field) + beta * mean(offset)`
pub fn total_loss(det: f64, field: &[f64], offset: &[f64], w: &LossWeights) -> Result<LossBreakdown> {
    if !det.is_finite() {
        return Err(Error::NonFinite("detection loss".into()));
    }
    if w.alpha < 0.0 || w.beta < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let field = finite_mean("field", field)?;
    let offset = finite_mean("offset", offset)?;
    Ok(LossBreakdown {
        total: det + w.alpha * field + w.beta * offset,
        detection: det,
        field,
        offset,
    })
}
