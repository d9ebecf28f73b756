//! Planar rigid-body poses, BEV grids, feature-map warping and rotated IoU.

use std::f64::consts::PI;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::feature::{FeatureMap, FrameId};

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// SE(2) pose: where a child frame sits in its parent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
        }
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.yaw.sin_cos();
        Self::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    /// Maps a point given in the child frame into the parent frame.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.x + c * p[0] - s * p[1],
            self.y + s * p[0] + c * p[1],
        ]
    }

    pub fn approx_eq(&self, other: &Pose2, tol: f64) -> bool {
        (self.x - other.x).abs() <= tol
            && (self.y - other.y).abs() <= tol
            && normalize_angle(self.yaw - other.yaw).abs() <= tol
    }
}

/// `a ∘ b`: the pose of frame `b` (given relative to `a`) expressed in `a`'s parent.
pub fn compose(a: &Pose2, b: &Pose2) -> Pose2 {
    let [x, y] = a.apply([b.x, b.y]);
    Pose2::new(x, y, a.yaw + b.yaw)
}

/// Relative pose taking coordinates in frame `from` to frame `to`, both given in a common world frame.
pub fn relative(to: &Pose2, from: &Pose2) -> Pose2 {
    compose(&to.inverse(), from)
}

/// BEV oriented box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, yaw: f64, length: f64, width: f64) -> Self {
        Self {
            cx,
            cy,
            yaw,
            length,
            width,
        }
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.length > 0.0 && self.width > 0.0)
            || !self.cx.is_finite()
            || !self.cy.is_finite()
            || !self.yaw.is_finite()
    }

    /// Corners in counter-clockwise order, starting front-left... front-right.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let local = [[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]];
        local.map(|[u, v]| [self.cx + c * u - s * v, self.cy + s * u + c * v])
    }

    /// Box expressed in the parent frame of `pose`.
    pub fn transformed(&self, pose: &Pose2) -> Self {
        let [cx, cy] = pose.apply([self.cx, self.cy]);
        Self {
            cx,
            cy,
            yaw: normalize_angle(self.yaw + pose.yaw),
            ..*self
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.length / 2.0 && v.abs() <= self.width / 2.0
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc / 2.0
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let p_in = cross(a, b, p) >= 0.0;
            let q_in = cross(a, b, q) >= 0.0;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                let dp = cross(a, b, p);
                let dq = cross(a, b, q);
                let t = dp / (dp - dq);
                output.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    output
}

/// Intersection-over-union of two BEV boxes; zero-area boxes give 0.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let reach = (a.length.hypot(a.width) + b.length.hypot(b.width)) / 2.0;
    if (a.cx - b.cx).hypot(a.cy - b.cy) > reach {
        return 0.0;
    }
    let inter = polygon_area(&clip_convex(&a.corners(), &b.corners())).max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Axis-aligned BEV raster. Cell `(r, c)` is centered at
/// `origin + ((c + 0.5), (r + 0.5)) * cell_size`; rows run along +y, columns along +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub height_cells: usize,
    pub width_cells: usize,
}

impl GridSpec {
    pub fn new(origin_x: f64, origin_y: f64, cell_size: f64, height: usize, width: usize) -> Self {
        Self {
            origin_x,
            origin_y,
            cell_size,
            height_cells: height,
            width_cells: width,
        }
    }

    /// Grid centered on the sensor covering `[-half_x, half_x) x [-half_y, half_y)`.
    pub fn centered(half_x: f64, half_y: f64, cell_size: f64) -> Self {
        let width = (2.0 * half_x / cell_size).round() as usize;
        let height = (2.0 * half_y / cell_size).round() as usize;
        Self::new(-half_x, -half_y, cell_size, height, width)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin_x + (col as f64 + 0.5) * self.cell_size,
            self.origin_y + (row as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Half-open floor assignment of a world point to a cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin_x) / self.cell_size).floor();
        let r = ((y - self.origin_y) / self.cell_size).floor();
        if c < 0.0 || r < 0.0 || c >= self.width_cells as f64 || r >= self.height_cells as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Continuous `(row, col)` coordinates where integers are cell centers.
    pub fn continuous_cell(&self, x: f64, y: f64) -> [f64; 2] {
        [
            (y - self.origin_y) / self.cell_size - 0.5,
            (x - self.origin_x) / self.cell_size - 0.5,
        ]
    }

    pub fn world_of_continuous(&self, row: f64, col: f64) -> [f64; 2] {
        [
            self.origin_x + (col + 0.5) * self.cell_size,
            self.origin_y + (row + 0.5) * self.cell_size,
        ]
    }

    pub fn num_cells(&self) -> usize {
        self.height_cells * self.width_cells
    }

    /// Coarser grid covering the same extent (`factor` cells merge into one).
    pub fn downsampled(&self, factor: usize) -> Self {
        Self {
            cell_size: self.cell_size * factor as f64,
            height_cells: self.height_cells / factor,
            width_cells: self.width_cells / factor,
            ..*self
        }
    }

    pub fn same_layout(&self, other: &GridSpec) -> bool {
        self.height_cells == other.height_cells
            && self.width_cells == other.width_cells
            && (self.cell_size - other.cell_size).abs() < 1e-12
            && (self.origin_x - other.origin_x).abs() < 1e-9
            && (self.origin_y - other.origin_y).abs() < 1e-9
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Bilinear read of every channel at continuous `(row, col)`; taps outside the
/// grid count as zero. Writes into `out` (length = channels).
pub fn bilinear_sample_into(data: &ArrayView3<f64>, row: f64, col: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let (_, h, w) = data.dim();
    let row = snap(row);
    let col = snap(col);
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let taps = [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1.0, (1.0 - fr) * fc),
        (r0 + 1.0, c0, fr * (1.0 - fc)),
        (r0 + 1.0, c0 + 1.0, fr * fc),
    ];
    for (r, c, wgt) in taps {
        if wgt == 0.0 || r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            continue;
        }
        let (r, c) = (r as usize, c as usize);
        for (k, o) in out.iter_mut().enumerate() {
            *o += wgt * data[[k, r, c]];
        }
    }
}

pub fn bilinear_sample(data: &ArrayView3<f64>, row: f64, col: f64) -> Vec<f64> {
    let mut out = vec![0.0; data.dim().0];
    bilinear_sample_into(data, row, col, &mut out);
    out
}

/// Resamples `f` into the frame reached by `rel` on the same grid layout.
/// Output metadata `frame` names the target frame.
pub fn warp_feature_map(f: &FeatureMap, rel: &Pose2, target: FrameId) -> FeatureMap {
    warp_into_grid(f, rel, &f.grid, target)
}

/// Resamples `f` onto `grid` (expressed in the target frame). `rel` maps
/// coordinates in `f`'s frame into the target frame.
pub fn warp_into_grid(f: &FeatureMap, rel: &Pose2, grid: &GridSpec, target: FrameId) -> FeatureMap {
    let channels = f.channels();
    let inv = rel.inverse();
    let src = f.data.view();
    let mut data = Array3::zeros((channels, grid.height_cells, grid.width_cells));
    let mut buf = vec![0.0; channels];
    for r in 0..grid.height_cells {
        for c in 0..grid.width_cells {
            let p = inv.apply(grid.cell_center(r, c));
            let [sr, sc] = f.grid.continuous_cell(p[0], p[1]);
            bilinear_sample_into(&src, sr, sc, &mut buf);
            for (k, v) in buf.iter().enumerate() {
                data[[k, r, c]] = *v;
            }
        }
    }
    FeatureMap {
        grid: *grid,
        timestamp_us: target.timestamp_us,
        agent_id: f.agent_id.clone(),
        frame: target,
        data,
    }
}
