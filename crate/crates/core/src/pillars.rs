//! Point clouds to BEV feature maps: pillarization, point decoration,
//! per-pillar encoding and a dense stride-4 backbone.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::geometry::GridSpec;
use crate::nn::{normal_matrix, relu_inplace, Activation, Conv2d};
use crate::params::TensorBundle;
use crate::simkit::PointCloudFrame;

pub const POINT_DIM: usize = 9;

/// `[x, y, z, x_c, y_c, z_c, x_p, y_p, z_p]`
pub type DecoratedPoint = [f64; POINT_DIM];

/// Where `(x_c, y_c, z_c)` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PillarCenter {
    /// Cell center in x/y, z-range midpoint in z.
    #[default]
    Geometric,
    /// Mean of the pillar's points.
    PointMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pillars {
    pub grid: GridSpec,
    pub cells: BTreeMap<(usize, usize), Vec<DecoratedPoint>>,
    pub dropped: usize,
}

impl Pillars {
    pub fn num_points(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }
}

pub fn pillarize(
    points: &[[f64; 3]],
    grid: &GridSpec,
    z_range: (f64, f64),
    center: PillarCenter,
) -> Pillars {
    let mut raw: BTreeMap<(usize, usize), Vec<[f64; 3]>> = BTreeMap::new();
    let mut dropped = 0;
    for &p in points {
        let in_z = p[2] >= z_range.0 && p[2] <= z_range.1;
        match grid.cell_of(p[0], p[1]) {
            Some(cell) if in_z && p.iter().all(|v| v.is_finite()) => {
                raw.entry(cell).or_default().push(p)
            }
            _ => dropped += 1,
        }
    }
    let z_mid = 0.5 * (z_range.0 + z_range.1);
    let cells = raw
        .into_iter()
        .map(|((r, c), pts)| {
            let centre = match center {
                PillarCenter::Geometric => {
                    let [x, y] = grid.cell_center(r, c);
                    [x, y, z_mid]
                }
                PillarCenter::PointMean => {
                    let n = pts.len() as f64;
                    let mut m = [0.0; 3];
                    for p in &pts {
                        for k in 0..3 {
                            m[k] += p[k] / n;
                        }
                    }
                    m
                }
            };
            let decorated = pts
                .iter()
                .map(|p| {
                    [
                        p[0],
                        p[1],
                        p[2],
                        centre[0],
                        centre[1],
                        centre[2],
                        p[0] - centre[0],
                        p[1] - centre[1],
                        p[2] - centre[2],
                    ]
                })
                .collect();
            ((r, c), decorated)
        })
        .collect();
    Pillars {
        grid: *grid,
        cells,
        dropped,
    }
}

pub fn pillarize_frame(
    frame: &PointCloudFrame,
    grid: &GridSpec,
    z_range: (f64, f64),
    center: PillarCenter,
) -> Pillars {
    let pillars = pillarize(&frame.points, grid, z_range, center);
    if pillars.dropped > 0 {
        log::debug!(
            "{}@{}: {} points outside range",
            frame.agent_id,
            frame.timestamp_us,
            pillars.dropped
        );
    }
    pillars
}

/// Per-point affine map `9 -> C_enc` followed by an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl EncoderParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            weight: Array2::zeros((channels, POINT_DIM)),
            bias: Array1::zeros(channels),
            activation: Activation::Relu,
        }
    }

    /// First nine channels copy the decorated vector; no activation.
    pub fn pass_through(channels: usize) -> Result<Self> {
        if channels < POINT_DIM {
            return Err(Error::Config(format!(
                "pass-through encoder needs >= {POINT_DIM} channels, got {channels}"
            )));
        }
        let mut p = Self::zeros(channels);
        for k in 0..POINT_DIM {
            p.weight[[k, k]] = 1.0;
        }
        p.activation = Activation::Identity;
        Ok(p)
    }

    pub fn seeded<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut weight = normal_matrix(channels, POINT_DIM, 1.0, rng);
        // absolute coordinates span tens of meters
        for col in [0, 1, 3, 4] {
            weight.column_mut(col).mapv_inplace(|v| v * 0.01);
        }
        Self {
            weight,
            bias: Array1::from_elem(channels, 0.5),
            activation: Activation::Relu,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.ncols() != POINT_DIM || self.bias.len() != self.weight.nrows() {
            return Err(Error::Config(format!(
                "encoder weight {:?} / bias {} inconsistent with {POINT_DIM}-dim points",
                self.weight.dim(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn save_into(&self, bundle: &mut TensorBundle, prefix: &str) {
        bundle.insert(format!("{prefix}.weight"), &self.weight.clone().into_dyn());
        bundle.insert(format!("{prefix}.bias"), &self.bias.clone().into_dyn());
    }

    pub fn load_from(bundle: &TensorBundle, prefix: &str) -> Result<Self> {
        let weight = bundle
            .get(&format!("{prefix}.weight"))?
            .into_dimensionality()
            .map_err(|e| Error::Shape(format!("{prefix}.weight: {e}")))?;
        let bias = bundle
            .get(&format!("{prefix}.bias"))?
            .into_dimensionality()
            .map_err(|e| Error::Shape(format!("{prefix}.bias: {e}")))?;
        let p = Self {
            weight,
            bias,
            activation: Activation::Relu,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Max-pooled per-pillar encodings scattered onto the pillar grid.
pub fn encode_pillars(
    pillars: &Pillars,
    params: &EncoderParams,
    agent_id: &str,
    timestamp_us: i64,
) -> Result<FeatureMap> {
    params.validate()?;
    let ch = params.channels();
    let mut out = FeatureMap::zeros(ch, pillars.grid, agent_id, timestamp_us);
    let mut pooled = vec![0.0; ch];
    for (&(r, c), pts) in &pillars.cells {
        pooled.fill(f64::NEG_INFINITY);
        for p in pts {
            for (k, slot) in pooled.iter_mut().enumerate() {
                let mut v = params.bias[k];
                for (d, x) in p.iter().enumerate() {
                    v += params.weight[[k, d]] * x;
                }
                *slot = slot.max(params.activation.apply(v));
            }
        }
        for (k, v) in pooled.iter().enumerate() {
            out.data[[k, r, c]] = *v;
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("pillar encoding for {agent_id}@{timestamp_us}")));
    }
    Ok(out)
}

/// Two stride-2 3x3 convolution blocks with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub blocks: [Conv2d; 2],
}

impl BackboneParams {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            blocks: [Conv2d::zeros(in_ch, out_ch, 3, 2), Conv2d::zeros(out_ch, out_ch, 3, 2)],
        }
    }

    /// Non-negative random weights whose expected sum per output is 1, so a
    /// uniformly occupied window keeps its magnitude and responses grow with
    /// local occupancy.
    pub fn seeded<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let mut block = |i: usize, o: usize| {
            let mut conv = Conv2d::zeros(i, o, 3, 2);
            let fan_in = (i * 9) as f64;
            let scale = 1.0 / (fan_in * (2.0 / std::f64::consts::PI).sqrt());
            conv.weight.mapv_inplace(|_| rng.sample::<f64, _>(rand_distr::StandardNormal).abs() * scale);
            conv
        };
        let first = block(in_ch, out_ch);
        Self {
            blocks: [first, block(out_ch, out_ch)],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks[1].out_channels()
    }

    /// Input cells influencing output cell `o` along one axis.
    pub fn receptive_span(o: usize) -> (isize, isize) {
        let o = o as isize;
        (4 * o - 3, 4 * o + 3)
    }

    pub fn save_into(&self, bundle: &mut TensorBundle, prefix: &str) {
        bundle.insert_conv(&format!("{prefix}.0"), &self.blocks[0]);
        bundle.insert_conv(&format!("{prefix}.1"), &self.blocks[1]);
    }

    pub fn load_from(bundle: &TensorBundle, prefix: &str) -> Result<Self> {
        Ok(Self {
            blocks: [
                bundle.get_conv(&format!("{prefix}.0"))?,
                bundle.get_conv(&format!("{prefix}.1"))?,
            ],
        })
    }
}

pub fn backbone(f: &FeatureMap, params: &BackboneParams) -> Result<FeatureMap> {
    let (_, h, w) = f.data.dim();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape(format!("backbone needs H, W divisible by 4, got {h}x{w}")));
    }
    let mut x: Array3<f64> = f.data.clone();
    for conv in &params.blocks {
        x = conv.forward(&x.view())?;
        relu_inplace(&mut x);
    }
    FeatureMap::from_data(x, feature_grid(&f.grid), &f.agent_id, f.timestamp_us)
}

/// Backbone output grid. Each output's receptive field is centered on base
/// cell `4o`, so the grid origin sits 1.5 base cells below the base origin.
pub fn feature_grid(base: &GridSpec) -> GridSpec {
    let mut g = base.downsampled(4);
    g.origin_x -= 1.5 * base.cell_size;
    g.origin_y -= 1.5 * base.cell_size;
    g
}

/// Pillarize, encode and run the backbone on one frame.
pub fn frame_features(
    frame: &PointCloudFrame,
    grid: &GridSpec,
    z_range: (f64, f64),
    encoder: &EncoderParams,
    bb: &BackboneParams,
) -> Result<FeatureMap> {
    let pillars = pillarize_frame(frame, grid, z_range, PillarCenter::Geometric);
    let base = encode_pillars(&pillars, encoder, &frame.agent_id, frame.timestamp_us)?;
    backbone(&base, bb).map_err(|e| e.at_frame(frame.timestamp_us))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const Z: (f64, f64) = (-3.0, 1.0);

    fn grid0() -> GridSpec {
        GridSpec::new(0.0, 0.0, 0.4, 16, 16)
    }

    #[test]
    fn hand_decoration() {
        let p = pillarize(&[[1.0, 1.0, 0.5]], &grid0(), Z, PillarCenter::Geometric);
        let pts = &p.cells[&(2, 2)];
        let d = pts[0];
        assert!((d[3] - 1.0).abs() < 1e-12 && (d[4] - 1.0).abs() < 1e-12);
        assert!(d[6].abs() < 1e-12 && d[7].abs() < 1e-12);
        assert_eq!(d[5], -1.0);
        assert_eq!(d[3] + d[6], d[0]);
    }

    #[test]
    fn boundary_and_out_of_range() {
        let p = pillarize(
            &[[0.8, 0.1, 0.0], [-0.1, 0.1, 0.0], [0.1, 0.1, 5.0]],
            &grid0(),
            Z,
            PillarCenter::Geometric,
        );
        assert!(p.cells.contains_key(&(0, 2)));
        assert_eq!(p.dropped, 2);
        assert_eq!(p.num_points(), 1);
    }

    #[test]
    fn point_mean_center() {
        let p = pillarize(
            &[[0.1, 0.1, 0.0], [0.3, 0.3, 1.0]],
            &grid0(),
            Z,
            PillarCenter::PointMean,
        );
        let d = p.cells[&(0, 0)][0];
        assert!((d[3] - 0.2).abs() < 1e-12 && (d[5] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn encoder_fixtures() {
        let pts = [[1.0, 1.0, 0.5]];
        let p = pillarize(&pts, &grid0(), Z, PillarCenter::Geometric);
        let zero = encode_pillars(&p, &EncoderParams::zeros(4), "a", 0).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));

        let enc = EncoderParams::pass_through(12).unwrap();
        let f = encode_pillars(&p, &enc, "a", 0).unwrap();
        let d = p.cells[&(2, 2)][0];
        for k in 0..9 {
            assert_eq!(f.data[[k, 2, 2]], d[k]);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderParams::seeded(8, &mut rng);
        let once = encode_pillars(&p, &enc, "a", 0).unwrap();
        let twice = pillarize(&[pts[0], pts[0]], &grid0(), Z, PillarCenter::Geometric);
        assert_eq!(encode_pillars(&twice, &enc, "a", 0).unwrap().data, once.data);
    }

    #[test]
    fn encoder_shape_mismatch_is_config_error() {
        let mut enc = EncoderParams::zeros(4);
        enc.bias = Array1::zeros(3);
        let p = pillarize(&[], &grid0(), Z, PillarCenter::Geometric);
        assert!(matches!(encode_pillars(&p, &enc, "a", 0), Err(Error::Config(_))));
    }

    fn impulse(ch: usize, n: usize, r: usize, c: usize) -> FeatureMap {
        let grid = GridSpec::new(0.0, 0.0, 0.4, n, n);
        let mut f = FeatureMap::zeros(ch, grid, "a", 0);
        f.data[[0, r, c]] = 1.0;
        f
    }

    #[test]
    fn backbone_shapes_and_zeros() {
        let f = FeatureMap::zeros(4, GridSpec::new(0.0, 0.0, 0.4, 64, 64), "a", 0);
        let out = backbone(&f, &BackboneParams::zeros(4, 6)).unwrap();
        assert_eq!(out.data.dim(), (6, 16, 16));
        assert!((out.grid.cell_size - 1.6).abs() < 1e-12);
        assert!(out.data.iter().all(|&v| v == 0.0));
        let bad = FeatureMap::zeros(4, GridSpec::new(0.0, 0.0, 0.4, 30, 32), "a", 0);
        assert!(matches!(backbone(&bad, &BackboneParams::zeros(4, 6)), Err(Error::Shape(_))));
    }

    #[test]
    fn backbone_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bb = BackboneParams::seeded(2, 4, &mut rng);
        for b in &mut bb.blocks {
            b.weight.mapv_inplace(f64::abs);
        }
        let (r, c) = (21, 30);
        let out = backbone(&impulse(2, 64, r, c), &bb).unwrap();
        for ((_, orow, ocol), &v) in out.data.indexed_iter() {
            let (lr, hr) = BackboneParams::receptive_span(orow);
            let (lc, hc) = BackboneParams::receptive_span(ocol);
            let inside = (lr..=hr).contains(&(r as isize)) && (lc..=hc).contains(&(c as isize));
            if !inside {
                assert_eq!(v, 0.0);
            }
        }
        assert!(out.data.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn backbone_shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = BackboneParams::seeded(3, 4, &mut rng);
        let grid = GridSpec::new(0.0, 0.0, 0.4, 48, 48);
        let mut a = FeatureMap::zeros(3, grid, "a", 0);
        let mut b = a.clone();
        for ((k, r, c), v) in a.data.indexed_iter_mut() {
            *v = ((k + 1) as f64 * 0.3 * r as f64).sin() + (0.2 * c as f64).cos();
        }
        for ((k, r, c), v) in b.data.indexed_iter_mut() {
            *v = if c >= 4 { a.data[[k, r, c - 4]] } else { 0.0 };
        }
        let oa = backbone(&a, &bb).unwrap();
        let ob = backbone(&b, &bb).unwrap();
        for k in 0..4 {
            for r in 2..10 {
                for c in 2..10 {
                    assert!((ob.data[[k, r, c + 1]] - oa.data[[k, r, c]]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn empty_neighbourhoods_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bb = BackboneParams::seeded(2, 4, &mut rng);
        let out = backbone(&impulse(2, 32, 3, 3), &bb).unwrap();
        for ((_, r, c), &v) in out.data.indexed_iter() {
            if r > 2 || c > 2 {
                assert_eq!(v, 0.0);
            }
        }
    }
}
