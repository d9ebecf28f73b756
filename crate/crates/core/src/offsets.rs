//! Attention positions: ground truth from trajectory fields, a convolutional
//! offset generator, entropic matching and the matched offset loss.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{SINKHORN_EPSILON, SINKHORN_MAX_ITERS, SINKHORN_TOLERANCE};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::nn::{concat_channels, Conv2d, PRelu};
use crate::params::TensorBundle;
use crate::trajfield::TrajectoryField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Predicted,
    GroundTruth,
}

/// `n` continuous `(row, col)` attention positions for one query cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetSet {
    pub query: (usize, usize),
    pub positions: Vec<[f64; 2]>,
    pub flavor: Flavor,
}

impl OffsetSet {
    pub fn at_query(query: (usize, usize), n: usize, flavor: Flavor) -> Self {
        Self {
            query,
            positions: vec![[query.0 as f64, query.1 as f64]; n],
            flavor,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Ground-truth positions for every cell in raster order.
pub fn gt_offsets_map(field: &TrajectoryField, n: usize) -> Vec<OffsetSet> {
    let (h, w) = field.position.dim();
    let mut by_object: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for r in 0..h {
        for c in 0..w {
            if let Some(t) = field.tag(r, c) {
                if field.position[[r, c]] > 0.0 {
                    by_object.entry(t.object_id).or_default().push((r, c));
                }
            }
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let cells = field
                .tag(r, c)
                .and_then(|t| by_object.get(&t.object_id))
                .map_or(&[][..], Vec::as_slice);
            out.push(select_gt(field, (r, c), cells, n));
        }
    }
    out
}

pub fn gt_offsets(query: (usize, usize), field: &TrajectoryField, n: usize) -> OffsetSet {
    let (h, w) = field.position.dim();
    let cells: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| field.tag(r, c).is_some() && field.position[[r, c]] > 0.0)
        .collect();
    select_gt(field, query, &cells, n)
}

fn select_gt(field: &TrajectoryField, query: (usize, usize), cells: &[(usize, usize)], n: usize) -> OffsetSet {
    let Some(q) = field.tag(query.0, query.1) else {
        return OffsetSet::at_query(query, n, Flavor::GroundTruth);
    };
    let mut cand: Vec<_> = cells
        .iter()
        .filter_map(|&(r, c)| {
            let t = field.tag(r, c)?;
            (t.object_id == q.object_id && t.time_index > q.time_index && field.position[[r, c]] > 0.0)
                .then_some((t, r, c))
        })
        .collect();
    if cand.is_empty() {
        return OffsetSet::at_query(query, n, Flavor::GroundTruth);
    }
    cand.sort_by(|a, b| {
        a.0.track_distance
            .total_cmp(&b.0.track_distance)
            .then(b.0.time_index.cmp(&a.0.time_index))
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    cand.truncate(n);
    cand.sort_by(|a, b| {
        b.0.time_index
            .cmp(&a.0.time_index)
            .then(a.0.track_distance.total_cmp(&b.0.track_distance))
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut positions: Vec<[f64; 2]> = cand.iter().map(|&(_, r, c)| [r as f64, c as f64]).collect();
    let oldest = positions[0];
    positions.resize(n, oldest);
    OffsetSet {
        query,
        positions,
        flavor: Flavor::GroundTruth,
    }
}

/// conv3x3 + PReLU, conv3x3 + PReLU, 1x1 head with `2n` channels of `(dr, dc)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetGenerator {
    pub conv1: Conv2d,
    pub act1: PRelu,
    pub conv2: Conv2d,
    pub act2: PRelu,
    pub head: Conv2d,
}

impl OffsetGenerator {
    pub fn zeros(in_ch: usize, hidden: usize, n: usize) -> Self {
        Self {
            conv1: Conv2d::zeros(in_ch, hidden, 3, 1),
            act1: PRelu::new(hidden, 0.25),
            conv2: Conv2d::zeros(hidden, hidden, 3, 1),
            act2: PRelu::new(hidden, 0.25),
            head: Conv2d::zeros(hidden, 2 * n, 1, 1),
        }
    }

    /// `head_scale` sets the spread of the initial offsets.
    pub fn seeded<R: Rng + ?Sized>(in_ch: usize, hidden: usize, n: usize, head_scale: f64, rng: &mut R) -> Self {
        let mut g = Self {
            conv1: Conv2d::seeded(in_ch, hidden, 3, 1, rng),
            act1: PRelu::new(hidden, 0.25),
            conv2: Conv2d::seeded(hidden, hidden, 3, 1, rng),
            act2: PRelu::new(hidden, 0.25),
            head: Conv2d::seeded(hidden, 2 * n, 1, 1, rng),
        };
        g.head.weight.mapv_inplace(|v| v * head_scale);
        g
    }

    pub fn num_offsets(&self) -> usize {
        self.head.out_channels() / 2
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    /// Raw `2n x H x W` delta map.
    pub fn delta_map(&self, input: &ArrayView3<f64>) -> Result<Array3<f64>> {
        let mut x = self.conv1.forward(input)?;
        self.act1.apply(&mut x);
        let mut x = self.conv2.forward(&x.view())?;
        self.act2.apply(&mut x);
        self.head.forward(&x.view())
    }

    pub fn save_into(&self, bundle: &mut TensorBundle, prefix: &str) {
        bundle.insert_conv(&format!("{prefix}.conv1"), &self.conv1);
        bundle.insert_conv(&format!("{prefix}.conv2"), &self.conv2);
        bundle.insert_conv(&format!("{prefix}.head"), &self.head);
        bundle.insert(format!("{prefix}.act1"), &self.act1.slope.clone().into_dyn());
        bundle.insert(format!("{prefix}.act2"), &self.act2.slope.clone().into_dyn());
    }

    pub fn load_from(bundle: &TensorBundle, prefix: &str) -> Result<Self> {
        let slope = |name: &str| -> Result<PRelu> {
            let a = bundle.get(&format!("{prefix}.{name}"))?;
            let slope = a
                .into_dimensionality()
                .map_err(|e| Error::Shape(format!("{prefix}.{name}: {e}")))?;
            Ok(PRelu { slope })
        };
        Ok(Self {
            conv1: bundle.get_conv(&format!("{prefix}.conv1"))?,
            act1: slope("act1")?,
            conv2: bundle.get_conv(&format!("{prefix}.conv2"))?,
            act2: slope("act2")?,
            head: bundle.get_conv(&format!("{prefix}.head"))?,
        })
    }
}

/// Predicted positions for every cell in raster order: query + delta.
pub fn predict_offsets(
    features: &FeatureMap,
    field: &TrajectoryField,
    params: &OffsetGenerator,
) -> Result<Vec<OffsetSet>> {
    if !features.grid.same_layout(&field.grid) {
        return Err(Error::Shape("offset generator: feature and field grids differ".into()));
    }
    let input = concat_channels(&[features.data.view(), field.stacked().view()])?;
    let deltas = params.delta_map(&input.view())?;
    Ok(offsets_from_deltas(&deltas))
}

pub fn offsets_from_deltas(deltas: &Array3<f64>) -> Vec<OffsetSet> {
    let (ch, h, w) = deltas.dim();
    let n = ch / 2;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let positions = (0..n)
                .map(|j| [r as f64 + deltas[[2 * j, r, c]], c as f64 + deltas[[2 * j + 1, r, c]]])
                .collect();
            out.push(OffsetSet {
                query: (r, c),
                positions,
                flavor: Flavor::Predicted,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub cost: Array2<f64>,
    pub plan: Array2<f64>,
    pub iterations: usize,
    /// Max absolute deviation of row/column sums from their marginals.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: SINKHORN_EPSILON,
            max_iters: SINKHORN_MAX_ITERS,
            tolerance: SINKHORN_TOLERANCE,
        }
    }
}

const ANNEAL: f64 = 0.7;

fn logsumexp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn marginal_residual(plan: &Array2<f64>) -> f64 {
    let (n, m) = plan.dim();
    let rows = plan.sum_axis(Axis(1)).iter().map(|s| (s - 1.0 / n as f64).abs()).fold(0.0, f64::max);
    let cols = plan.sum_axis(Axis(0)).iter().map(|s| (s - 1.0 / m as f64).abs()).fold(0.0, f64::max);
    rows.max(cols)
}

/// Log-domain Sinkhorn scaling to uniform marginals.
pub fn sinkhorn(cost: &Array2<f64>, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::Empty("sinkhorn cost matrix".into()));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinkhorn cost".into()));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Config(format!("sinkhorn epsilon must be > 0, got {}", cfg.epsilon)));
    }
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    // dual potentials in cost units; epsilon is annealed from the cost scale
    // down to the target, then held until the marginals converge
    let scale = cost.iter().fold(0.0f64, |a, &c| a.max(c.abs()));
    let mut eps = scale.max(cfg.epsilon);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        for j in 0..n {
            f[j] = -eps * (logsumexp((0..m).map(|k| (g[k] - cost[[j, k]]) / eps)) - log_a);
        }
        for k in 0..m {
            g[k] = -eps * (logsumexp((0..n).map(|j| (f[j] - cost[[j, k]]) / eps)) - log_b);
        }
        iterations += 1;
        if eps > cfg.epsilon {
            eps = (eps * ANNEAL).max(cfg.epsilon);
            continue;
        }
        // columns are exact after the g-update; rows carry the residual
        let residual = (0..n)
            .map(|j| {
                let s: f64 = (0..m).map(|k| ((f[j] + g[k] - cost[[j, k]]) / eps).exp()).sum();
                (s - 1.0 / n as f64).abs()
            })
            .fold(0.0, f64::max);
        if residual < cfg.tolerance {
            break;
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(j, k)| ((f[j] + g[k] - cost[[j, k]]) / eps).exp());
    let residual = marginal_residual(&plan);
    Ok(TransportPlan {
        cost: cost.clone(),
        plan,
        iterations,
        residual,
    })
}

pub fn l1_cost(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Array2<f64> {
    Array2::from_shape_fn((pred.len(), gt.len()), |(j, k)| {
        (pred[j][0] - gt[k][0]).abs() + (pred[j][1] - gt[k][1]).abs()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetLoss {
    pub loss: f64,
    pub plan: TransportPlan,
}

pub fn offset_loss(pred: &OffsetSet, gt: &OffsetSet, cfg: &SinkhornConfig) -> Result<OffsetLoss> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("offset sets differ in size: {} vs {}", pred.len(), gt.len())));
    }
    let cost = l1_cost(&pred.positions, &gt.positions);
    let plan = sinkhorn(&cost, cfg)?;
    let loss = (&plan.plan * &plan.cost).sum();
    Ok(OffsetLoss { loss, plan })
}

/// Gradient w.r.t. predicted positions holding the plan fixed.
pub fn offset_loss_grad(pred: &OffsetSet, gt: &OffsetSet, plan: &TransportPlan) -> Vec<[f64; 2]> {
    let sign = |d: f64| if d == 0.0 { 0.0 } else { d.signum() };
    pred.positions
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let mut g = [0.0; 2];
            for (k, q) in gt.positions.iter().enumerate() {
                let w = plan.plan[[j, k]];
                g[0] += w * sign(p[0] - q[0]);
                g[1] += w * sign(p[1] - q[1]);
            }
            g
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuerySelection {
    #[default]
    All,
    ForegroundOnly,
}

/// Mean offset loss over queries; foreground means the query cell is covered in `field`.
pub fn offset_map_loss(
    preds: &[OffsetSet],
    gts: &[OffsetSet],
    field: &TrajectoryField,
    selection: QuerySelection,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Shape("offset maps differ in query count".into()));
    }
    let losses: Vec<f64> = preds
        .par_iter()
        .zip(gts.par_iter())
        .filter(|(p, _)| selection == QuerySelection::All || field.tag(p.query.0, p.query.1).is_some())
        .map(|(p, g)| offset_loss(p, g, cfg).map(|l| l.loss))
        .collect::<Result<_>>()?;
    if losses.is_empty() {
        return Ok(0.0);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn write_offsets_jsonl<W: Write>(sets: &[OffsetSet], mut out: W) -> Result<()> {
    for s in sets {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_offsets_jsonl<R: BufRead>(input: R) -> Result<Vec<OffsetSet>> {
    let mut sets = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            sets.push(serde_json::from_str(&line)?);
        }
    }
    Ok(sets)
}
