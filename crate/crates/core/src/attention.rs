//! Trajectory-aware attention: each cell attends over features sampled at its
//! own offset positions, followed by FFN and add & norm.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::constants::{ATTENTION_HEADS, ATTENTION_LAYERS};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::geometry::bilinear_sample_into;
use crate::nn::normal_matrix;
use crate::offsets::OffsetSet;
use crate::trajfield::TrajectoryField;

/// `n x C` features gathered at an offset set's positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSet {
    pub rows: Array2<f64>,
}

pub fn gather_response(f: &FeatureMap, offs: &OffsetSet) -> ResponseSet {
    let c = f.channels();
    let view = f.data.view();
    let mut rows = Array2::zeros((offs.len(), c));
    let mut buf = vec![0.0; c];
    for (j, p) in offs.positions.iter().enumerate() {
        bilinear_sample_into(&view, p[0], p[1], &mut buf);
        rows.row_mut(j).iter_mut().zip(&buf).for_each(|(o, v)| *o = *v);
    }
    ResponseSet { rows }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 1e-5,
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.eps).sqrt();
        for (k, v) in x.iter_mut().enumerate() {
            *v = (*v - mean) * inv * self.gamma[k] + self.beta[k];
        }
    }
}

/// `relu(x W1 + b1) W2 + b2`
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Array2<f64>,
    pub b1: Vec<f64>,
    pub w2: Array2<f64>,
    pub b2: Vec<f64>,
}

impl FeedForward {
    pub fn seeded<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: normal_matrix(channels, hidden, (2.0 / channels as f64).sqrt(), rng),
            b1: vec![0.0; hidden],
            w2: normal_matrix(hidden, channels, (1.0 / hidden as f64).sqrt(), rng),
            b2: vec![0.0; channels],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = (0..self.w1.ncols())
            .map(|h| {
                let v = self.b1[h] + x.iter().enumerate().map(|(k, xv)| xv * self.w1[[k, h]]).sum::<f64>();
                v.max(0.0)
            })
            .collect();
        (0..self.w2.ncols())
            .map(|o| self.b2[o] + hidden.iter().enumerate().map(|(h, hv)| hv * self.w2[[h, o]]).sum::<f64>())
            .collect()
    }
}

/// One attention block. Matrices act on row vectors (`x W`), `C x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub heads: usize,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub ffn: Option<FeedForward>,
    pub norm1: Option<LayerNorm>,
    pub norm2: Option<LayerNorm>,
    pub residual: bool,
}

fn eye(c: usize) -> Array2<f64> {
    Array2::eye(c)
}

impl AttentionLayer {
    /// Zero logits, identity values and output; no residual, norm or FFN.
    /// Each query becomes the mean of its response rows.
    pub fn uniform_mean(channels: usize, heads: usize) -> Self {
        Self {
            heads,
            w_q: Array2::zeros((channels, channels)),
            w_k: Array2::zeros((channels, channels)),
            w_v: eye(channels),
            w_o: eye(channels),
            ffn: None,
            norm1: None,
            norm2: None,
            residual: true,
        }
        .without_residual()
    }

    /// Zero output projection with the residual on: the input passes through.
    pub fn pass_through(channels: usize, heads: usize) -> Self {
        Self {
            heads,
            w_q: Array2::zeros((channels, channels)),
            w_k: Array2::zeros((channels, channels)),
            w_v: eye(channels),
            w_o: Array2::zeros((channels, channels)),
            ffn: None,
            norm1: None,
            norm2: None,
            residual: true,
        }
    }

    pub fn seeded<R: Rng + ?Sized>(channels: usize, heads: usize, rng: &mut R) -> Self {
        let std = (1.0 / channels as f64).sqrt();
        Self {
            heads,
            w_q: normal_matrix(channels, channels, std, rng),
            w_k: normal_matrix(channels, channels, std, rng),
            w_v: normal_matrix(channels, channels, std, rng),
            w_o: normal_matrix(channels, channels, std, rng),
            ffn: Some(FeedForward::seeded(channels, 4 * channels, rng)),
            norm1: Some(LayerNorm::new(channels)),
            norm2: Some(LayerNorm::new(channels)),
            residual: true,
        }
    }

    pub fn without_residual(mut self) -> Self {
        self.residual = false;
        self
    }

    pub fn channels(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn head_width(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not split {c} channels", self.heads)));
        }
        for (name, m) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if m.dim() != (c, c) {
                return Err(Error::Shape(format!("{name} is {:?}, expected {c}x{c}", m.dim())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(())
    }

    /// Residual, norm, FFN, residual, norm applied to the attention output.
    pub fn finish(&self, query: &[f64], mut attn: Vec<f64>) -> Vec<f64> {
        if self.residual {
            attn.iter_mut().zip(query).for_each(|(a, q)| *a += q);
        }
        if let Some(n) = &self.norm1 {
            n.apply(&mut attn);
        }
        if let Some(ffn) = &self.ffn {
            let mut z = ffn.apply(&attn);
            if self.residual {
                z.iter_mut().zip(&attn).for_each(|(a, q)| *a += q);
            }
            attn = z;
        }
        if let Some(n) = &self.norm2 {
            n.apply(&mut attn);
        }
        attn
    }
}

fn row_times(x: &[f64], m: &Array2<f64>) -> Vec<f64> {
    (0..m.ncols())
        .map(|o| x.iter().enumerate().map(|(k, v)| v * m[[k, o]]).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Output-projected, heads concatenated.
    pub value: Vec<f64>,
    /// Per head, one weight per response row.
    pub weights: Vec<Vec<f64>>,
}

/// Scaled dot-product attention on already projected query, keys and values.
fn attend_projected(q: &[f64], keys: &ArrayView2<f64>, values: &ArrayView2<f64>, layer: &AttentionLayer) -> AttentionOutput {
    let heads = layer.heads;
    let d = layer.head_width();
    let n = keys.nrows();
    let scale = 1.0 / (d as f64).sqrt();
    let mut concat = vec![0.0; layer.channels()];
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let span = h * d..(h + 1) * d;
        let logits: Vec<f64> = (0..n)
            .map(|j| span.clone().map(|k| q[k] * keys[[j, k]]).sum::<f64>() * scale)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= z);
        for k in span {
            concat[k] = (0..n).map(|j| w[j] * values[[j, k]]).sum();
        }
        weights.push(w);
    }
    AttentionOutput {
        value: row_times(&concat, &layer.w_o),
        weights,
    }
}

/// Attention of one query over a response set (attention block only).
pub fn attend(q: &[f64], r: &ResponseSet, layer: &AttentionLayer) -> AttentionOutput {
    let qp = row_times(q, &layer.w_q);
    let keys = r.rows.dot(&layer.w_k);
    let values = r.rows.dot(&layer.w_v);
    attend_projected(&qp, &keys.view(), &values.view(), layer)
}

/// Full block for one token: attention followed by add & norm and FFN.
pub fn attend_token(q: &[f64], r: &ResponseSet, layer: &AttentionLayer) -> Vec<f64> {
    let out = attend(q, r, layer);
    layer.finish(q, out.value)
}

/// `H x W x C` copy of `x` projected by `m` per cell.
fn project_cells(x: &Array3<f64>, m: &Array2<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let flat = x.view().into_shape_with_order((c, h * w)).expect("contiguous").reversed_axes();
    let out = flat.dot(m);
    out.into_shape_with_order((h, w, m.ncols())).expect("shape")
}

fn sample_hwc(data: &Array3<f64>, row: f64, col: f64, out: &mut [f64]) {
    let view = data.view().permuted_axes([2, 0, 1]);
    bilinear_sample_into(&view, row, col, out);
}

/// One layer over the whole map. Keys and values are projected once per cell
/// and then sampled, which equals projecting sampled features.
pub fn align_layer(f: &FeatureMap, offsets: &[OffsetSet], layer: &AttentionLayer) -> Result<FeatureMap> {
    layer.validate()?;
    let (c, h, w) = f.data.dim();
    if c != layer.channels() {
        return Err(Error::Shape(format!("attention expects {} channels, got {c}", layer.channels())));
    }
    if offsets.len() != h * w {
        return Err(Error::Shape(format!("{} offset sets for {} cells", offsets.len(), h * w)));
    }
    let x = f.data.as_standard_layout().into_owned();
    let qmap = project_cells(&x, &layer.w_q);
    let kmap = project_cells(&x, &layer.w_k);
    let vmap = project_cells(&x, &layer.w_v);
    let rows: Vec<Vec<Vec<f64>>> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut out_row = Vec::with_capacity(w);
            for col in 0..w {
                let offs = &offsets[r * w + col];
                let n = offs.len();
                let mut keys = Array2::zeros((n, c));
                let mut values = Array2::zeros((n, c));
                let mut buf = vec![0.0; c];
                for (j, p) in offs.positions.iter().enumerate() {
                    sample_hwc(&kmap, p[0], p[1], &mut buf);
                    keys.row_mut(j).iter_mut().zip(&buf).for_each(|(o, v)| *o = *v);
                    sample_hwc(&vmap, p[0], p[1], &mut buf);
                    values.row_mut(j).iter_mut().zip(&buf).for_each(|(o, v)| *o = *v);
                }
                let q: Vec<f64> = qmap.slice(ndarray::s![r, col, ..]).to_vec();
                let att = attend_projected(&q, &keys.view(), &values.view(), layer);
                let query: Vec<f64> = x.slice(ndarray::s![.., r, col]).to_vec();
                out_row.push(layer.finish(&query, att.value));
            }
            out_row
        })
        .collect();
    let mut data = Array3::zeros((c, h, w));
    for (r, row) in rows.into_iter().enumerate() {
        for (col, v) in row.into_iter().enumerate() {
            for (k, x) in v.into_iter().enumerate() {
                data[[k, r, col]] = x;
            }
        }
    }
    Ok(f.with_data(data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub layers: Vec<AttentionLayer>,
}

impl AttentionStack {
    pub fn seeded<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            layers: (0..ATTENTION_LAYERS)
                .map(|_| AttentionLayer::seeded(channels, ATTENTION_HEADS, rng))
                .collect(),
        }
    }

    /// Uniform-mean layer followed by a pass-through layer.
    pub fn oracle(channels: usize) -> Self {
        Self {
            layers: vec![
                AttentionLayer::uniform_mean(channels, ATTENTION_HEADS),
                AttentionLayer::pass_through(channels, ATTENTION_HEADS),
            ],
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            layers: (0..ATTENTION_LAYERS)
                .map(|_| AttentionLayer::pass_through(channels, ATTENTION_HEADS))
                .collect(),
        }
    }
}

/// Runs the stack; `offsets_for(layer_index, layer_input)` supplies each
/// layer's positions, so callers choose between reuse and regeneration.
pub fn align_agent(
    f: &FeatureMap,
    stack: &AttentionStack,
    mut offsets_for: impl FnMut(usize, &FeatureMap) -> Result<Vec<OffsetSet>>,
) -> Result<FeatureMap> {
    let mut cur = f.clone();
    for (k, layer) in stack.layers.iter().enumerate() {
        let offs = offsets_for(k, &cur)?;
        cur = align_layer(&cur, &offs, layer)?;
    }
    if !cur.is_finite() {
        return Err(Error::NonFinite(format!("aligned map of {}", f.agent_id)));
    }
    Ok(cur)
}

/// Gaussian weight around each object's newest trajectory point on the
/// cells claimed by that newest sample, zero on older covered cells, 1
/// elsewhere. `heads` maps object id to continuous `(row, col)`.
pub fn head_gate(field: &TrajectoryField, heads: &BTreeMap<u32, [f64; 2]>, sigma_cells: f64) -> Array2<f64> {
    let (h, w) = field.position.dim();
    let mut newest: BTreeMap<u32, u32> = BTreeMap::new();
    for r in 0..h {
        for c in 0..w {
            if let Some(t) = field.tag(r, c) {
                let e = newest.entry(t.object_id).or_insert(t.time_index);
                *e = (*e).min(t.time_index);
            }
        }
    }
    Array2::from_shape_fn((h, w), |(r, c)| match field.tag(r, c) {
        Some(t) => heads.get(&t.object_id).map_or(1.0, |p| {
            if newest.get(&t.object_id).is_some_and(|&n| t.time_index > n) {
                return 0.0;
            }
            let d2 = (r as f64 - p[0]).powi(2) + (c as f64 - p[1]).powi(2);
            (-d2 / (2.0 * sigma_cells * sigma_cells)).exp()
        }),
        None => 1.0,
    })
}

pub fn apply_gate(f: &mut FeatureMap, gate: &Array2<f64>) {
    for mut plane in f.data.axis_iter_mut(Axis(0)) {
        plane *= gate;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;
    use crate::offsets::Flavor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(c: usize, n: usize) -> FeatureMap {
        let grid = GridSpec::new(0.0, 0.0, 1.0, n, n);
        let mut f = FeatureMap::zeros(c, grid, "a", 0);
        for ((k, r, col), v) in f.data.indexed_iter_mut() {
            *v = ((k as f64 + 1.0) * 0.37 * r as f64).sin() + (0.21 * (col * (k + 1)) as f64).cos();
        }
        f
    }

    fn random_offsets(n_cells: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<OffsetSet> {
        (0..n_cells)
            .map(|i| OffsetSet {
                query: (i / w, i % w),
                positions: (0..18)
                    .map(|_| [(i / w) as f64 + rng.random_range(-2.0..2.0), (i % w) as f64 + rng.random_range(-2.0..2.0)])
                    .collect(),
                flavor: Flavor::Predicted,
            })
            .collect()
    }

    #[test]
    fn gather_fixtures() {
        let f = pattern(4, 6);
        let q = OffsetSet::at_query((2, 3), 18, Flavor::GroundTruth);
        let r = gather_response(&f, &q);
        assert_eq!(r.rows.nrows(), 18);
        for row in r.rows.rows() {
            assert_eq!(row.to_vec(), f.data.slice(ndarray::s![.., 2, 3]).to_vec());
        }
        let mid = OffsetSet {
            query: (0, 0),
            positions: vec![[1.0, 1.5]],
            flavor: Flavor::Predicted,
        };
        let r = gather_response(&f, &mid);
        for k in 0..4 {
            let want = 0.5 * (f.data[[k, 1, 1]] + f.data[[k, 1, 2]]);
            assert!((r.rows[[0, k]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn map_level_matches_token_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = pattern(8, 6);
        let layer = AttentionLayer::seeded(8, 4, &mut rng);
        let offs = random_offsets(36, 6, &mut rng);
        let out = align_layer(&f, &offs, &layer).unwrap();
        for o in &offs {
            let q: Vec<f64> = f.data.slice(ndarray::s![.., o.query.0, o.query.1]).to_vec();
            let want = attend_token(&q, &gather_response(&f, o), &layer);
            for k in 0..8 {
                assert!((out.data[[k, o.query.0, o.query.1]] - want[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_stack_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = pattern(8, 5);
        let offs = random_offsets(25, 5, &mut rng);
        let out = align_agent(&f, &AttentionStack::identity(8), |_, _| Ok(offs.clone())).unwrap();
        assert_eq!(out.data, f.data);
    }

    #[test]
    fn uniform_layer_is_mean_of_rows() {
        let f = pattern(4, 6);
        let offs = OffsetSet {
            query: (3, 3),
            positions: vec![[1.0, 1.0], [2.0, 4.0], [5.0, 0.0]],
            flavor: Flavor::GroundTruth,
        };
        let layer = AttentionLayer::uniform_mean(4, 1);
        let q: Vec<f64> = f.data.slice(ndarray::s![.., 3, 3]).to_vec();
        let out = attend_token(&q, &gather_response(&f, &offs), &layer);
        for k in 0..4 {
            let want = (f.data[[k, 1, 1]] + f.data[[k, 2, 4]] + f.data[[k, 5, 0]]) / 3.0;
            assert!((out[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 4;
        let mut layer = AttentionLayer::seeded(c, 1, &mut rng);
        layer.w_q = Array2::eye(c);
        layer.w_k = Array2::eye(c);
        let q = vec![1.0, 0.0, 0.0, 0.0];
        let mut rows = normal_matrix(5, c, 0.1, &mut rng);
        rows[[2, 0]] = 80.0;
        let r = ResponseSet { rows: rows.clone() };
        let out = attend(&q, &r, &layer);
        assert!(out.weights[0][2] > 1.0 - 1e-12);
        let want = row_times(&row_times(&rows.row(2).to_vec(), &layer.w_v), &layer.w_o);
        for k in 0..c {
            assert!((out.value[k] - want[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn large_inputs_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = AttentionLayer::seeded(8, 4, &mut rng);
        let mut f = pattern(8, 4);
        f.data.mapv_inplace(|v| v * 1e3);
        let offs = random_offsets(16, 4, &mut rng);
        assert!(align_layer(&f, &offs, &layer).unwrap().is_finite());
    }

    #[test]
    fn gate_shape() {
        let mut field = TrajectoryField::empty(GridSpec::new(0.0, 0.0, 1.0, 5, 5));
        field.tags.as_mut().unwrap()[[2, 2]] = Some(crate::trajfield::CellTag {
            object_id: 1,
            time_index: 0,
            timestamp_us: 0,
            track_distance: 0.0,
        });
        field.tags.as_mut().unwrap()[[2, 3]] = field.tag(2, 2);
        field.tags.as_mut().unwrap()[[2, 1]] = field.tag(2, 2).map(|t| crate::trajfield::CellTag { time_index: 2, ..t });
        let heads = BTreeMap::from([(1, [2.0, 2.0])]);
        let g = head_gate(&field, &heads, 1.0);
        assert_eq!(g[[2, 2]], 1.0);
        assert!((g[[2, 3]] - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(g[[2, 1]], 0.0);
        assert_eq!(g[[0, 0]], 1.0);
    }
}
