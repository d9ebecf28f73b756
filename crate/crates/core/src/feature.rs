use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;

/// Coordinate frame a feature map is expressed in: an agent's sensor frame
/// at one capture time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameId {
    pub agent_id: String,
    pub timestamp_us: i64,
}

impl FrameId {
    pub fn new(agent_id: impl Into<String>, timestamp_us: i64) -> Self {
        Self {
            agent_id: agent_id.into(),
            timestamp_us,
        }
    }
}

/// Dense `C x H x W` BEV grid with geo-referencing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: GridSpec,
    pub timestamp_us: i64,
    pub agent_id: String,
    pub frame: FrameId,
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, grid: GridSpec, agent_id: &str, timestamp_us: i64) -> Self {
        Self {
            data: Array3::zeros((channels, grid.height_cells, grid.width_cells)),
            grid,
            timestamp_us,
            agent_id: agent_id.to_string(),
            frame: FrameId::new(agent_id, timestamp_us),
        }
    }

    /// Wraps `data`, checking it against `grid`.
    pub fn from_data(
        data: Array3<f64>,
        grid: GridSpec,
        agent_id: &str,
        timestamp_us: i64,
    ) -> Result<Self> {
        let (_, h, w) = data.dim();
        if h != grid.height_cells || w != grid.width_cells {
            return Err(Error::Shape(format!(
                "data is {h}x{w}, grid is {}x{}",
                grid.height_cells, grid.width_cells
            )));
        }
        Ok(Self {
            data,
            grid,
            timestamp_us,
            agent_id: agent_id.to_string(),
            frame: FrameId::new(agent_id, timestamp_us),
        })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// Same metadata, new data.
    pub fn with_data(&self, data: Array3<f64>) -> Self {
        Self {
            grid: self.grid,
            timestamp_us: self.timestamp_us,
            agent_id: self.agent_id.clone(),
            frame: self.frame.clone(),
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// L2 norm over channels per cell.
    pub fn norm_map(&self) -> ndarray::Array2<f64> {
        let (_, h, w) = self.data.dim();
        ndarray::Array2::from_shape_fn((h, w), |(r, c)| {
            self.data
                .slice(ndarray::s![.., r, c])
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
    }

    /// Cell with the largest channel norm; ties resolve to the first in raster order.
    pub fn peak_cell(&self) -> (usize, usize) {
        let norms = self.norm_map();
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((r, c), &v) in norms.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
        best
    }

    /// Sub-cell `(row, col)` of the norm peak: centroid of the 5x5 window
    /// around [`Self::peak_cell`], weighted by the norm in excess of the level
    /// halfway between the map's median norm and the peak.
    pub fn peak_position(&self) -> [f64; 2] {
        let norms = self.norm_map();
        let (h, w) = norms.dim();
        let (pr, pc) = self.peak_cell();
        let window: Vec<(usize, usize)> = (pr.saturating_sub(2)..=(pr + 2).min(h - 1))
            .flat_map(|r| (pc.saturating_sub(2)..=(pc + 2).min(w - 1)).map(move |c| (r, c)))
            .collect();
        let mut sorted: Vec<f64> = norms.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let floor = 0.5 * (median + norms[[pr, pc]]);
        let (mut sw, mut sr, mut sc) = (0.0, 0.0, 0.0);
        for &(r, c) in &window {
            let wt = (norms[[r, c]] - floor).max(0.0);
            sw += wt;
            sr += wt * r as f64;
            sc += wt * c as f64;
        }
        if sw <= 0.0 {
            return [pr as f64, pc as f64];
        }
        [sr / sw, sc / sw]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_position_splits_between_equal_cells() {
        let mut f = FeatureMap::zeros(2, GridSpec::new(0.0, 0.0, 1.0, 6, 6), "a", 0);
        f.data[[0, 2, 2]] = 2.0;
        f.data[[0, 2, 3]] = 2.0;
        f.data[[0, 3, 2]] = 1.0;
        assert_eq!(f.peak_cell(), (2, 2));
        let p = f.peak_position();
        assert!((p[0] - 2.0).abs() < 1e-12);
        assert!((p[1] - 2.5).abs() < 1e-12);
    }
}
