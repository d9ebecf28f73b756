//! Average precision with greedy IoU matching and all-point interpolation.

use serde::{Deserialize, Serialize};

use crate::fusion::Detection;
use crate::geometry::rotated_iou;
use crate::simkit::BoxAnnotation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub pr_curve: Vec<PrPoint>,
    /// Set when there was no ground truth; `ap` is then 0.
    pub no_gt: bool,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Detections and ground truth of one evaluated frame.
#[derive(Debug, Clone, Default)]
pub struct FrameEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<BoxAnnotation>,
}

/// Marks each detection of a frame as a true positive, highest score first.
fn match_frame(frame: &FrameEval, iou_thresh: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<&Detection> = frame.detections.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken = vec![false; frame.ground_truth.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best = None;
            let mut best_iou = iou_thresh;
            for (i, g) in frame.ground_truth.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let iou = rotated_iou(&d.bbox, &g.bbox);
                if iou >= best_iou {
                    best_iou = iou;
                    best = Some(i);
                }
            }
            if let Some(i) = best {
                taken[i] = true;
            }
            (d.score, best.is_some())
        })
        .collect()
}

/// Area under the monotone precision envelope.
fn all_point_ap(curve: &[PrPoint]) -> f64 {
    let mut prec: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (p, env) in curve.iter().zip(prec) {
        ap += (p.recall - last_recall) * env;
        last_recall = p.recall;
    }
    ap
}

/// Pools matches over frames and ranks them by score.
pub fn evaluate_frames(frames: &[FrameEval], iou_thresh: f64) -> ApResult {
    let n_gt: usize = frames.iter().map(|f| f.ground_truth.len()).sum();
    let mut hits: Vec<(f64, bool)> = frames.iter().flat_map(|f| match_frame(f, iou_thresh)).collect();
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_det = hits.len();
    if n_gt == 0 {
        return ApResult {
            ap: 0.0,
            pr_curve: Vec::new(),
            no_gt: true,
            n_gt,
            n_det,
        };
    }
    let mut tp = 0usize;
    let pr_curve: Vec<PrPoint> = hits
        .iter()
        .enumerate()
        .map(|(i, &(score, hit))| {
            tp += hit as usize;
            PrPoint {
                score,
                precision: tp as f64 / (i + 1) as f64,
                recall: tp as f64 / n_gt as f64,
            }
        })
        .collect();
    ApResult {
        ap: all_point_ap(&pr_curve),
        pr_curve,
        no_gt: false,
        n_gt,
        n_det,
    }
}

pub fn average_precision(dets: &[Detection], gts: &[BoxAnnotation], iou_thresh: f64) -> ApResult {
    evaluate_frames(
        &[FrameEval {
            detections: dets.to_vec(),
            ground_truth: gts.to_vec(),
        }],
        iou_thresh,
    )
}
