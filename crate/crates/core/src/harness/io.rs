//! Detection, ground-truth and PR-curve files.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::Detection;
use crate::geometry::OrientedBox;
use crate::harness::metrics::{FrameEval, PrPoint};
use crate::simkit::{BoxAnnotation, BoxRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub cx: f64,
    pub cy: f64,
    pub yaw: f64,
    pub l: f64,
    pub w: f64,
    pub score: f64,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            cx: d.bbox.cx,
            cy: d.bbox.cy,
            yaw: d.bbox.yaw,
            l: d.bbox.length,
            w: d.bbox.width,
            score: d.score,
        }
    }
}

impl From<DetectionRecord> for Detection {
    fn from(r: DetectionRecord) -> Self {
        Detection {
            bbox: OrientedBox::new(r.cx, r.cy, r.yaw, r.l, r.w),
            score: r.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub timestamp_us: i64,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub timestamp_us: i64,
    pub boxes: Vec<BoxRecord>,
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_detections_frame(path: &Path, timestamp_us: i64, dets: &[Detection]) -> Result<()> {
    append_line(
        path,
        &DetectionFrame {
            timestamp_us,
            detections: dets.iter().map(DetectionRecord::from).collect(),
        },
    )
}

pub fn write_ground_truth_frame(path: &Path, timestamp_us: i64, gts: &[BoxAnnotation]) -> Result<()> {
    append_line(
        path,
        &GroundTruthFrame {
            timestamp_us,
            boxes: gts.iter().map(BoxRecord::from).collect(),
        },
    )
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionFrame>> {
    read_lines(path)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthFrame>> {
    read_lines(path)
}

/// Pairs detection and ground-truth frames by timestamp; frames missing on
/// either side count as empty.
pub fn pair_frames(dets: &[DetectionFrame], gts: &[GroundTruthFrame]) -> Vec<FrameEval> {
    let mut times: Vec<i64> = dets.iter().map(|d| d.timestamp_us).chain(gts.iter().map(|g| g.timestamp_us)).collect();
    times.sort_unstable();
    times.dedup();
    times
        .into_iter()
        .map(|t| FrameEval {
            detections: dets
                .iter()
                .filter(|d| d.timestamp_us == t)
                .flat_map(|d| d.detections.iter().map(|r| Detection::from(*r)))
                .collect(),
            ground_truth: gts
                .iter()
                .filter(|g| g.timestamp_us == t)
                .flat_map(|g| g.boxes.iter().map(move |b| b.to_annotation(t)))
                .collect(),
        })
        .collect()
}

pub fn write_pr_csv(path: &Path, curve: &[PrPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
