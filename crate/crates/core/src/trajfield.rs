//! Trajectory fields: ground-truth trajectories from multi-frame boxes,
//! rasterization onto the feature grid, a small UNet field predictor and the
//! field loss.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::constants::{FOCAL_ALPHA, FOCAL_BETA, HEATMAP_SIGMA_CELLS, UNET_DEPTH, UNET_WIDTH};
use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::nn::{concat_channels, relu_inplace, sigmoid, upsample2, Conv2d};
use crate::params::TensorBundle;
use crate::simkit::BoxAnnotation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub timestamp_us: i64,
    /// Whole frames behind the ego time.
    pub age: u32,
    pub cx: f64,
    pub cy: f64,
    pub yaw: f64,
}

/// Box centers of one object, oldest first, in the ego frame at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub object_id: u32,
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn newest(&self) -> Option<&TrajectorySample> {
        self.samples.last()
    }
}

/// `ceil(tau * omega) + m` with `tau` in microseconds.
pub fn trajectory_length(tau_us: i64, omega_hz: f64, m: usize) -> usize {
    let frames = tau_us as f64 * omega_hz / 1e6;
    (frames - 1e-9).ceil().max(0.0) as usize + m
}

/// Sample times `t - k / omega` for the trajectory window, oldest first.
pub fn window_times(t_us: i64, tau_us: i64, omega_hz: f64, m: usize) -> Vec<i64> {
    let n = trajectory_length(tau_us, omega_hz, m);
    let period = 1e6 / omega_hz;
    (0..n)
        .rev()
        .map(|k| t_us - (k as f64 * period).round() as i64)
        .collect()
}

/// Groups per-frame annotations into trajectories ending at `t_us`.
pub fn build_trajectories(
    annotations: &[Vec<BoxAnnotation>],
    t_us: i64,
    period_us: i64,
) -> Result<Vec<Trajectory>> {
    let mut by_id: BTreeMap<u32, BTreeMap<i64, BoxAnnotation>> = BTreeMap::new();
    for frame in annotations {
        for a in frame {
            if a.timestamp_us > t_us {
                continue;
            }
            let slot = by_id.entry(a.object_id).or_default();
            if slot.insert(a.timestamp_us, *a).is_some() {
                return Err(Error::DuplicateAnnotation {
                    object_id: a.object_id,
                    timestamp_us: a.timestamp_us,
                });
            }
        }
    }
    Ok(by_id
        .into_iter()
        .map(|(object_id, samples)| Trajectory {
            object_id,
            samples: samples
                .into_values()
                .map(|a| TrajectorySample {
                    timestamp_us: a.timestamp_us,
                    age: ((t_us - a.timestamp_us + period_us / 2) / period_us) as u32,
                    cx: a.bbox.cx,
                    cy: a.bbox.cy,
                    yaw: a.bbox.yaw,
                })
                .collect(),
        })
        .collect())
}

/// Bookkeeping for a cell covered by a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTag {
    pub object_id: u32,
    pub time_index: u32,
    pub timestamp_us: i64,
    /// Distance in cells from the cell center to the trajectory polyline.
    pub track_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeatmapMode {
    #[default]
    Gaussian,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryField {
    pub grid: GridSpec,
    pub position: Array2<f64>,
    /// `(cos, sin)` planes.
    pub orientation: Array3<f64>,
    /// Ground-truth only; `None` cells are uncovered.
    pub tags: Option<Array2<Option<CellTag>>>,
    pub skipped_trajectories: usize,
}

impl TrajectoryField {
    pub fn empty(grid: GridSpec) -> Self {
        let (h, w) = (grid.height_cells, grid.width_cells);
        Self {
            grid,
            position: Array2::zeros((h, w)),
            orientation: Array3::zeros((2, h, w)),
            tags: Some(Array2::from_elem((h, w), None)),
            skipped_trajectories: 0,
        }
    }

    pub fn tag(&self, r: usize, c: usize) -> Option<CellTag> {
        self.tags.as_ref().and_then(|t| t[[r, c]])
    }

    pub fn time_index(&self, r: usize, c: usize) -> Option<u32> {
        self.tag(r, c).map(|t| t.time_index)
    }

    pub fn covered_cells(&self) -> usize {
        self.tags
            .as_ref()
            .map_or(0, |t| t.iter().filter(|v| v.is_some()).count())
    }

    /// `position | cos | sin` as one `3 x H x W` array.
    pub fn stacked(&self) -> Array3<f64> {
        let pos = self.position.view().insert_axis(Axis(0));
        concat_channels(&[pos, self.orientation.view()]).expect("matching planes")
    }
}

struct DensePoint {
    row: f64,
    col: f64,
    tangent: [f64; 2],
    age: u32,
    timestamp_us: i64,
}

fn densify(traj: &Trajectory, grid: &GridSpec) -> Vec<DensePoint> {
    let cell = grid.cell_size;
    let s = &traj.samples;
    let mut out = Vec::new();
    let heading = |k: usize| [s[k].yaw.cos(), s[k].yaw.sin()];
    let seg_dir = |k: usize| -> Option<[f64; 2]> {
        let (dx, dy) = (s[k + 1].cx - s[k].cx, s[k + 1].cy - s[k].cy);
        let len = dx.hypot(dy);
        (len > 1e-9).then(|| [dx / len, dy / len])
    };
    let push = |out: &mut Vec<DensePoint>, x: f64, y: f64, tangent, k: usize| {
        let [row, col] = grid.continuous_cell(x, y);
        out.push(DensePoint {
            row,
            col,
            tangent,
            age: s[k].age,
            timestamp_us: s[k].timestamp_us,
        });
    };
    for k in 0..s.len().saturating_sub(1) {
        let (a, b) = (&s[k], &s[k + 1]);
        let len = (b.cx - a.cx).hypot(b.cy - a.cy);
        let tangent = seg_dir(k).unwrap_or_else(|| heading(k));
        let steps = ((len / (0.5 * cell)).ceil() as usize).max(1);
        for i in 0..steps {
            let f = i as f64 / steps as f64;
            let nearest = if f < 0.5 { k } else { k + 1 };
            push(&mut out, a.cx + f * (b.cx - a.cx), a.cy + f * (b.cy - a.cy), tangent, nearest);
        }
    }
    if let Some(last) = s.last() {
        let k = s.len() - 1;
        let tangent = if k > 0 {
            (0..k).rev().find_map(seg_dir).unwrap_or_else(|| heading(k))
        } else {
            heading(k)
        };
        push(&mut out, last.cx, last.cy, tangent, k);
    }
    out
}

/// Whether `a` should replace `b` in a cell covered by two trajectories.
fn newer_wins(a: &CellTag, b: &CellTag) -> bool {
    (b.timestamp_us, -b.track_distance_key(), std::cmp::Reverse(b.object_id))
        < (a.timestamp_us, -a.track_distance_key(), std::cmp::Reverse(a.object_id))
}

impl CellTag {
    fn track_distance_key(&self) -> i64 {
        (self.track_distance * 1e9).round() as i64
    }
}

pub fn rasterize_field(trajs: &[Trajectory], grid: &GridSpec, mode: HeatmapMode) -> TrajectoryField {
    let mut field = TrajectoryField::empty(*grid);
    let (h, w) = (grid.height_cells as isize, grid.width_cells as isize);
    let sigma = HEATMAP_SIGMA_CELLS;
    let radius = match mode {
        HeatmapMode::Gaussian => (3.0 * sigma).floor() as isize,
        HeatmapMode::Binary => 0,
    };
    let tags = field.tags.as_mut().expect("ground-truth field");
    for traj in trajs {
        if traj.is_empty() {
            continue;
        }
        let dense = densify(traj, grid);
        // per-trajectory winner: nearest dense point, newer on ties
        let mut local: BTreeMap<(isize, isize), (CellTag, [f64; 2])> = BTreeMap::new();
        let mut touched = false;
        for p in &dense {
            let (r0, c0) = ((p.row + 0.5).floor() as isize, (p.col + 0.5).floor() as isize);
            for dr in -radius..=radius {
                for dc in -radius..=radius {
                    let d2 = (dr * dr + dc * dc) as f64;
                    if d2 > (3.0 * sigma).powi(2) + 1e-12 {
                        continue;
                    }
                    let (r, c) = (r0 + dr, c0 + dc);
                    if r < 0 || c < 0 || r >= h || c >= w {
                        continue;
                    }
                    touched = true;
                    let (ru, cu) = (r as usize, c as usize);
                    let v = match mode {
                        HeatmapMode::Gaussian => (-d2 / (2.0 * sigma * sigma)).exp(),
                        HeatmapMode::Binary => 1.0,
                    };
                    if v > field.position[[ru, cu]] {
                        field.position[[ru, cu]] = v;
                    }
                    let dist = (r as f64 - p.row).hypot(c as f64 - p.col);
                    let tag = CellTag {
                        object_id: traj.object_id,
                        time_index: p.age,
                        timestamp_us: p.timestamp_us,
                        track_distance: dist,
                    };
                    local
                        .entry((r, c))
                        .and_modify(|(best, tan)| {
                            let closer = tag.track_distance_key() < best.track_distance_key();
                            let same = tag.track_distance_key() == best.track_distance_key();
                            if closer || (same && tag.timestamp_us > best.timestamp_us) {
                                *best = tag;
                                *tan = p.tangent;
                            }
                        })
                        .or_insert((tag, p.tangent));
                }
            }
        }
        if !touched {
            field.skipped_trajectories += 1;
            continue;
        }
        for ((r, c), (tag, tan)) in local {
            let (ru, cu) = (r as usize, c as usize);
            let replace = tags[[ru, cu]].is_none_or(|old| newer_wins(&tag, &old));
            if replace {
                tags[[ru, cu]] = Some(tag);
                field.orientation[[0, ru, cu]] = tan[0];
                field.orientation[[1, ru, cu]] = tan[1];
            }
        }
    }
    if field.skipped_trajectories > 0 {
        log::debug!("{} trajectories outside the grid", field.skipped_trajectories);
    }
    field
}

/// Encoder/decoder with skip concatenation and nearest-neighbour upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams {
    /// `encoder[0]` is stride 1, the rest stride 2.
    pub encoder: Vec<Conv2d>,
    /// Coarsest first.
    pub decoder: Vec<Conv2d>,
    pub head: Conv2d,
    pub threshold: f64,
}

impl UNetParams {
    fn build(in_ch: usize, width: usize, depth: usize, mut conv: impl FnMut(usize, usize, usize, usize) -> Conv2d) -> Self {
        let mut encoder = vec![conv(in_ch, width, 3, 1)];
        for _ in 0..depth {
            encoder.push(conv(width, width, 3, 2));
        }
        let decoder = (0..depth).map(|_| conv(2 * width, width, 3, 1)).collect();
        Self {
            encoder,
            decoder,
            head: conv(width, 3, 1, 1),
            threshold: 0.3,
        }
    }

    pub fn zeros(in_ch: usize) -> Self {
        Self::build(in_ch, UNET_WIDTH, UNET_DEPTH, Conv2d::zeros)
    }

    pub fn seeded<R: Rng + ?Sized>(in_ch: usize, rng: &mut R) -> Self {
        let mut p = Self::build(in_ch, UNET_WIDTH, UNET_DEPTH, |i, o, k, s| Conv2d::seeded(i, o, k, s, rng));
        p.head.weight.mapv_inplace(|v| v * 0.1);
        p
    }

    pub fn with_shape(in_ch: usize, width: usize, depth: usize) -> Self {
        Self::build(in_ch, width, depth, Conv2d::zeros)
    }

    pub fn depth(&self) -> usize {
        self.decoder.len()
    }

    pub fn save_into(&self, bundle: &mut TensorBundle, prefix: &str) {
        for (k, c) in self.encoder.iter().enumerate() {
            bundle.insert_conv(&format!("{prefix}.enc{k}"), c);
        }
        for (k, c) in self.decoder.iter().enumerate() {
            bundle.insert_conv(&format!("{prefix}.dec{k}"), c);
        }
        bundle.insert_conv(&format!("{prefix}.head"), &self.head);
    }

    pub fn load_from(bundle: &TensorBundle, prefix: &str, depth: usize) -> Result<Self> {
        let encoder = (0..=depth)
            .map(|k| bundle.get_conv(&format!("{prefix}.enc{k}")))
            .collect::<Result<_>>()?;
        let decoder = (0..depth)
            .map(|k| bundle.get_conv(&format!("{prefix}.dec{k}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            encoder,
            decoder,
            head: bundle.get_conv(&format!("{prefix}.head"))?,
            threshold: 0.3,
        })
    }
}

pub struct UNetOutput {
    /// Raw `3 x H x W` head output.
    pub raw: Array3<f64>,
    pub bottleneck: (usize, usize),
}

pub fn unet_forward(x: &ArrayView3<f64>, params: &UNetParams) -> Result<UNetOutput> {
    let (_, h, w) = x.dim();
    let depth = params.depth();
    let f = 1 << depth;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("field predictor needs H, W divisible by {f}, got {h}x{w}")));
    }
    let mut skips = Vec::with_capacity(depth + 1);
    let mut cur = params.encoder[0].forward(x)?;
    relu_inplace(&mut cur);
    for conv in &params.encoder[1..] {
        let mut next = conv.forward(&cur.view())?;
        relu_inplace(&mut next);
        skips.push(cur);
        cur = next;
    }
    let bottleneck = (cur.dim().1, cur.dim().2);
    for conv in &params.decoder {
        let skip = skips.pop().expect("one skip per level");
        let up = upsample2(&cur.view());
        let cat = concat_channels(&[up.view(), skip.view()])?;
        cur = conv.forward(&cat.view())?;
        relu_inplace(&mut cur);
    }
    let raw = params.head.forward(&cur.view())?;
    Ok(UNetOutput { raw, bottleneck })
}

/// Predicted field from the stacked history (no tags).
pub fn predict_field(history: &ArrayView3<f64>, grid: &GridSpec, params: &UNetParams) -> Result<TrajectoryField> {
    let out = unet_forward(history, params)?;
    let (_, h, w) = out.raw.dim();
    if h != grid.height_cells || w != grid.width_cells {
        return Err(Error::Shape("field predictor input does not match grid".into()));
    }
    let position = out.raw.index_axis(Axis(0), 0).mapv(sigmoid);
    let mut orientation = out.raw.slice(ndarray::s![1..3, .., ..]).to_owned();
    for r in 0..h {
        for c in 0..w {
            let (a, b) = (orientation[[0, r, c]], orientation[[1, r, c]]);
            let n = a.hypot(b);
            if position[[r, c]] > params.threshold && n > 1e-12 {
                orientation[[0, r, c]] = a / n;
                orientation[[1, r, c]] = b / n;
            }
        }
    }
    Ok(TrajectoryField {
        grid: *grid,
        position,
        orientation,
        tags: None,
        skipped_trajectories: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldLoss {
    pub total: f64,
    pub position: f64,
    pub orientation: f64,
    /// Ground truth had no peaks; the position term is 0.
    pub no_peaks: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldLossGrad {
    pub position: Array2<f64>,
    pub orientation: Array3<f64>,
}

const P_EPS: f64 = 1e-12;

pub(crate) fn focal_cell(p: f64, y: f64) -> (f64, f64) {
    let p = p.clamp(P_EPS, 1.0 - P_EPS);
    let (a, b) = (FOCAL_ALPHA, FOCAL_BETA);
    if y >= 1.0 {
        let l = -(1.0 - p).powf(a) * p.ln();
        let g = a * (1.0 - p).powf(a - 1.0) * p.ln() - (1.0 - p).powf(a) / p;
        (l, g)
    } else {
        let wgt = (1.0 - y).powf(b);
        let l = -wgt * p.powf(a) * (1.0 - p).ln();
        let g = -wgt * (a * p.powf(a - 1.0) * (1.0 - p).ln() - p.powf(a) / (1.0 - p));
        (l, g)
    }
}

fn check_shapes(pred: &TrajectoryField, gt: &TrajectoryField) -> Result<()> {
    if pred.position.dim() != gt.position.dim() || pred.orientation.dim() != gt.orientation.dim() {
        return Err(Error::Shape(format!(
            "field loss: pred {:?} vs gt {:?}",
            pred.position.dim(),
            gt.position.dim()
        )));
    }
    Ok(())
}

pub fn field_loss(pred: &TrajectoryField, gt: &TrajectoryField) -> Result<FieldLoss> {
    field_loss_with_grad(pred, gt).map(|(l, _)| l)
}

pub fn field_loss_with_grad(pred: &TrajectoryField, gt: &TrajectoryField) -> Result<(FieldLoss, FieldLossGrad)> {
    check_shapes(pred, gt)?;
    let (h, w) = gt.position.dim();
    let n_pos = gt.position.iter().filter(|&&y| y >= 1.0).count();
    let mut grad = FieldLossGrad {
        position: Array2::zeros((h, w)),
        orientation: Array3::zeros((2, h, w)),
    };
    let mut position = 0.0;
    if n_pos > 0 {
        let norm = n_pos as f64;
        for ((r, c), &y) in gt.position.indexed_iter() {
            let (l, g) = focal_cell(pred.position[[r, c]], y);
            position += l / norm;
            grad.position[[r, c]] = g / norm;
        }
    } else {
        log::warn!("field loss: ground truth has no peaks");
    }
    let mut orientation = 0.0;
    let n_cov = gt.covered_cells();
    if n_cov > 0 {
        let norm = n_cov as f64;
        for r in 0..h {
            for c in 0..w {
                if gt.tag(r, c).is_none() {
                    continue;
                }
                for k in 0..2 {
                    let d = pred.orientation[[k, r, c]] - gt.orientation[[k, r, c]];
                    orientation += d.abs() / norm;
                    grad.orientation[[k, r, c]] = if d == 0.0 { 0.0 } else { d.signum() / norm };
                }
            }
        }
    }
    Ok((
        FieldLoss {
            total: position + orientation,
            position,
            orientation,
            no_peaks: n_pos == 0,
        },
        grad,
    ))
}

const DUMP_MAGIC: &[u8; 4] = b"TRFD";

/// `magic | u32 H | u32 W | f32 position | f32 cos | f32 sin | i32 time_index (-1 empty)`, little-endian.
pub fn write_field_dump<W: Write>(field: &TrajectoryField, mut out: W) -> Result<()> {
    let (h, w) = field.position.dim();
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    for plane in [field.position.view(), field.orientation.index_axis(Axis(0), 0), field.orientation.index_axis(Axis(0), 1)] {
        for v in plane.iter() {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    for r in 0..h {
        for c in 0..w {
            let t = field.time_index(r, c).map_or(-1, |t| t as i32);
            out.write_all(&t.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Planes read back from a field dump.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDump {
    pub position: Array2<f32>,
    pub orientation: Array3<f32>,
    pub time_index: Array2<i32>,
}

pub fn read_field_dump<R: Read>(mut input: R) -> Result<FieldDump> {
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    if &word != DUMP_MAGIC {
        return Err(Error::Config("not a trajectory-field dump".into()));
    }
    let mut read_u32 = |input: &mut R| -> Result<u32> {
        input.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let h = read_u32(&mut input)? as usize;
    let w = read_u32(&mut input)? as usize;
    let mut buf = vec![0u8; 4 * h * w];
    let mut plane = |input: &mut R| -> Result<Vec<[u8; 4]>> {
        input.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(4).map(|b| [b[0], b[1], b[2], b[3]]).collect())
    };
    let mut floats = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        floats.extend(plane(&mut input)?.into_iter().map(f32::from_le_bytes));
    }
    let ti: Vec<i32> = plane(&mut input)?.into_iter().map(i32::from_le_bytes).collect();
    let shape_err = |e: ndarray::ShapeError| Error::Shape(e.to_string());
    let orientation = Array3::from_shape_vec((2, h, w), floats.split_off(h * w)).map_err(shape_err)?;
    Ok(FieldDump {
        position: Array2::from_shape_vec((h, w), floats).map_err(shape_err)?,
        orientation,
        time_index: Array2::from_shape_vec((h, w), ti).map_err(shape_err)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::OrientedBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridSpec {
        GridSpec::new(0.0, 0.0, 1.0, 16, 16)
    }

    fn line(id: u32, pts: &[(f64, f64)], t_us: i64) -> Trajectory {
        let n = pts.len();
        Trajectory {
            object_id: id,
            samples: pts
                .iter()
                .enumerate()
                .map(|(k, &(x, y))| {
                    let age = (n - 1 - k) as u32;
                    TrajectorySample {
                        timestamp_us: t_us - age as i64 * 100_000,
                        age,
                        cx: x,
                        cy: y,
                        yaw: 0.0,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn length_formula_fixtures() {
        assert_eq!(trajectory_length(400_000, 10.0, 4), 8);
        assert_eq!(trajectory_length(0, 10.0, 4), 4);
        assert_eq!(trajectory_length(250_000, 10.0, 1), 4);
        assert_eq!(trajectory_length(50_001, 20.0, 2), 4);
        let ts = window_times(1_000_000, 400_000, 10.0, 4);
        assert_eq!(ts.len(), 8);
        assert_eq!(*ts.last().unwrap(), 1_000_000);
        assert_eq!(ts[0], 300_000);
    }

    fn ann(id: u32, ts: i64, x: f64) -> BoxAnnotation {
        BoxAnnotation {
            object_id: id,
            timestamp_us: ts,
            bbox: OrientedBox::new(x, 0.0, 0.0, 4.0, 2.0),
        }
    }

    #[test]
    fn build_groups_and_orders() {
        let frames: Vec<Vec<BoxAnnotation>> = (0..8)
            .rev()
            .map(|k| vec![ann(1, 700_000 - k * 100_000, 10.0 - k as f64), ann(2, 700_000 - k * 100_000, 3.0)])
            .collect();
        let trajs = build_trajectories(&frames, 700_000, 100_000).unwrap();
        assert_eq!(trajs.len(), 2);
        let moving = &trajs[0];
        assert_eq!(moving.len(), 8);
        assert_eq!(moving.newest().unwrap().timestamp_us, 700_000);
        assert_eq!(moving.samples[0].age, 7);
        for w in moving.samples.windows(2) {
            assert!(((w[1].cx - w[0].cx) - 1.0).abs() < 1e-12);
        }
        let dup = vec![vec![ann(1, 0, 0.0)], vec![ann(1, 0, 1.0)]];
        assert!(matches!(
            build_trajectories(&dup, 0, 100_000),
            Err(Error::DuplicateAnnotation { object_id: 1, timestamp_us: 0 })
        ));
    }

    #[test]
    fn static_sample_kernel() {
        let g = grid();
        let t = line(1, &[(5.5, 5.5)], 0);
        let f = rasterize_field(&[t], &g, HeatmapMode::Gaussian);
        assert_eq!(f.position[[5, 5]], 1.0);
        assert!((f.position[[5, 6]] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((f.position[[7, 5]] - (-2.0f64).exp()).abs() < 1e-12);
        assert_eq!(f.position[[5, 9]], 0.0);
        assert_eq!(f.orientation[[0, 5, 5]], 1.0);
        let max = f.position.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn horizontal_line_orientation() {
        let f = rasterize_field(&[line(1, &[(2.5, 8.5), (6.5, 8.5), (10.5, 8.5)], 0)], &grid(), HeatmapMode::Gaussian);
        for r in 0..16 {
            for c in 0..16 {
                if f.tag(r, c).is_some() {
                    assert_eq!((f.orientation[[0, r, c]], f.orientation[[1, r, c]]), (1.0, 0.0));
                }
            }
        }
        assert_eq!(f.time_index(8, 10), Some(0));
        assert_eq!(f.time_index(8, 2), Some(2));
        for c in 2..=10 {
            assert_eq!(f.position[[8, c]], 1.0);
        }
    }

    #[test]
    fn crossing_cell_takes_newer_trajectory() {
        let t_us = 1_000_000;
        // horizontal ends at t; vertical ends two frames earlier, passing (8, 8)
        let a = line(1, &[(2.5, 8.5), (5.5, 8.5), (8.5, 8.5), (11.5, 8.5)], t_us);
        let mut b = line(2, &[(8.5, 2.5), (8.5, 5.5), (8.5, 8.5), (8.5, 11.5)], t_us);
        for s in &mut b.samples {
            s.age += 2;
            s.timestamp_us -= 200_000;
        }
        let f = rasterize_field(&[a.clone(), b.clone()], &grid(), HeatmapMode::Gaussian);
        let tag = f.tag(8, 8).unwrap();
        assert_eq!(tag.object_id, 1);
        assert_eq!(tag.time_index, 1);
        assert_eq!((f.orientation[[0, 8, 8]], f.orientation[[1, 8, 8]]), (1.0, 0.0));
        let g = rasterize_field(&[b, a], &grid(), HeatmapMode::Gaussian);
        assert_eq!(f, g);
    }

    #[test]
    fn binary_mode_marks_path_only() {
        let f = rasterize_field(&[line(1, &[(2.5, 8.5), (4.5, 8.5)], 0)], &grid(), HeatmapMode::Binary);
        assert_eq!(f.position.sum(), 3.0);
        assert_eq!(f.covered_cells(), 3);
    }

    #[test]
    fn offgrid_trajectory_is_skipped() {
        let f = rasterize_field(&[line(1, &[(-50.0, -50.0)], 0)], &grid(), HeatmapMode::Gaussian);
        assert_eq!(f.skipped_trajectories, 1);
        assert_eq!(f.covered_cells(), 0);
    }

    #[test]
    fn unet_shapes_and_zero_params() {
        let grid = GridSpec::new(0.0, 0.0, 1.0, 64, 64);
        let x = Array3::from_elem((4, 64, 64), 0.3);
        let p = UNetParams::zeros(4);
        let out = unet_forward(&x.view(), &p).unwrap();
        assert_eq!(out.bottleneck, (8, 8));
        assert_eq!(out.raw.dim(), (3, 64, 64));
        let f = predict_field(&x.view(), &grid, &p).unwrap();
        assert!(f.position.iter().all(|&v| v == 0.5));
        let bad = Array3::zeros((4, 60, 64));
        assert!(matches!(unet_forward(&bad.view(), &p), Err(Error::Shape(_))));
    }

    /// Input span `[lo, hi]` reaching each output index through the stack.
    fn spans(n: usize, depth: usize) -> Vec<(isize, isize)> {
        let conv = |prev: &[(isize, isize)], stride: usize, out_n: usize| -> Vec<(isize, isize)> {
            (0..out_n)
                .map(|o| {
                    let mut lo = isize::MAX;
                    let mut hi = isize::MIN;
                    for k in -1..=1isize {
                        let i = (o * stride) as isize + k;
                        if i >= 0 && (i as usize) < prev.len() {
                            lo = lo.min(prev[i as usize].0);
                            hi = hi.max(prev[i as usize].1);
                        }
                    }
                    (lo, hi)
                })
                .collect()
        };
        let input: Vec<_> = (0..n as isize).map(|i| (i, i)).collect();
        let mut levels = vec![conv(&input, 1, n)];
        for l in 1..=depth {
            levels.push(conv(&levels[l - 1], 2, n >> l));
        }
        let mut cur = levels[depth].clone();
        for l in (0..depth).rev() {
            let up: Vec<_> = (0..n >> l)
                .map(|i| {
                    let (a, b) = (cur[i / 2], levels[l][i]);
                    (a.0.min(b.0), a.1.max(b.1))
                })
                .collect();
            cur = conv(&up, 1, n >> l);
        }
        cur
    }

    #[test]
    fn unet_impulse_support_within_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = UNetParams::seeded(2, &mut rng);
        for c in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
            c.weight.mapv_inplace(f64::abs);
        }
        p.head.weight.mapv_inplace(f64::abs);
        let n = 64;
        let (r0, c0) = (30, 37);
        let mut x = Array3::zeros((2, n, n));
        x[[0, r0, c0]] = 1.0;
        let out = unet_forward(&x.view(), &p).unwrap().raw;
        let sp = spans(n, 3);
        let mut nonzero = 0;
        for ((_, r, c), &v) in out.indexed_iter() {
            let inside = (sp[r].0..=sp[r].1).contains(&(r0 as isize)) && (sp[c].0..=sp[c].1).contains(&(c0 as isize));
            if !inside {
                assert_eq!(v, 0.0, "({r},{c})");
            } else if v != 0.0 {
                nonzero += 1;
            }
        }
        assert!(nonzero > 0);
    }

    fn fixture_pair() -> (TrajectoryField, TrajectoryField) {
        let g = GridSpec::new(0.0, 0.0, 1.0, 8, 8);
        let gt = rasterize_field(&[line(1, &[(1.5, 3.5), (3.5, 3.5), (5.5, 3.5)], 0)], &g, HeatmapMode::Gaussian);
        let mut pred = gt.clone();
        pred.tags = None;
        (pred, gt)
    }

    #[test]
    fn loss_fixtures() {
        // hard targets: the penalty-reduced term is nonzero at p = y for 0 < y < 1
        let g8 = GridSpec::new(0.0, 0.0, 1.0, 8, 8);
        let gt = rasterize_field(&[line(1, &[(1.5, 3.5), (5.5, 3.5)], 0)], &g8, HeatmapMode::Binary);
        let l = field_loss(&gt.clone(), &gt).unwrap();
        assert!(l.position.abs() < 1e-9 && l.orientation == 0.0);

        let g = GridSpec::new(0.0, 0.0, 1.0, 1, 1);
        let mut gt1 = TrajectoryField::empty(g);
        gt1.position[[0, 0]] = 1.0;
        gt1.orientation[[0, 0, 0]] = 1.0;
        gt1.tags.as_mut().unwrap()[[0, 0]] = Some(CellTag {
            object_id: 1,
            time_index: 0,
            timestamp_us: 0,
            track_distance: 0.0,
        });
        let mut p1 = gt1.clone();
        p1.orientation[[0, 0, 0]] = 0.0;
        p1.orientation[[1, 0, 0]] = 1.0;
        assert!((field_loss(&p1, &gt1).unwrap().orientation - 2.0).abs() < 1e-15);
    }

    #[test]
    fn focal_matches_scalar_oracle() {
        let (mut pred, gt) = fixture_pair();
        pred.position.fill(0.5);
        let mut pos = 0.0;
        let mut n = 0.0;
        for &y in gt.position.iter() {
            if y == 1.0 {
                n += 1.0;
                pos += -(0.5f64 * 0.5) * 0.5f64.ln();
            } else {
                pos += -(1.0 - y).powi(4) * 0.25 * 0.5f64.ln();
            }
        }
        let l = field_loss(&pred, &gt).unwrap();
        assert!((l.position - pos / n).abs() < 1e-9);
    }

    #[test]
    fn no_peaks_flag() {
        let g = GridSpec::new(0.0, 0.0, 1.0, 4, 4);
        let gt = TrajectoryField::empty(g);
        let l = field_loss(&gt.clone(), &gt).unwrap();
        assert!(l.no_peaks && l.position == 0.0);
    }

    #[test]
    fn dump_round_trip() {
        let (_, gt) = fixture_pair();
        let mut buf = Vec::new();
        write_field_dump(&gt, &mut buf).unwrap();
        let back = read_field_dump(buf.as_slice()).unwrap();
        assert_eq!(back.position.mapv(f64::from), gt.position.mapv(|v| v as f32 as f64));
        assert_eq!(back.time_index[[3, 5]], 0);
        assert_eq!(back.time_index[[0, 7]], -1);
    }
}
