//! Frame streams as JSON lines, one frame per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoxAnnotation, PointCloudFrame};
use crate::error::Result;
use crate::geometry::{OrientedBox, Pose2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub id: u32,
    pub cx: f64,
    pub cy: f64,
    pub yaw: f64,
    pub l: f64,
    pub w: f64,
}

impl BoxRecord {
    pub fn to_annotation(&self, timestamp_us: i64) -> BoxAnnotation {
        BoxAnnotation {
            object_id: self.id,
            timestamp_us,
            bbox: OrientedBox::new(self.cx, self.cy, self.yaw, self.l, self.w),
        }
    }
}

impl From<&BoxAnnotation> for BoxRecord {
    fn from(b: &BoxAnnotation) -> Self {
        Self {
            id: b.object_id,
            cx: b.bbox.cx,
            cy: b.bbox.cy,
            yaw: b.bbox.yaw,
            l: b.bbox.length,
            w: b.bbox.width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub agent_id: String,
    pub timestamp_us: i64,
    pub pose: [f64; 3],
    pub points: Vec<[f64; 3]>,
    pub boxes: Vec<BoxRecord>,
}

impl From<&PointCloudFrame> for FrameRecord {
    fn from(f: &PointCloudFrame) -> Self {
        Self {
            agent_id: f.agent_id.clone(),
            timestamp_us: f.timestamp_us,
            pose: [f.sensor_pose.x, f.sensor_pose.y, f.sensor_pose.yaw],
            points: f.points.clone(),
            boxes: f.boxes.iter().map(BoxRecord::from).collect(),
        }
    }
}

impl From<FrameRecord> for PointCloudFrame {
    fn from(r: FrameRecord) -> Self {
        let ts = r.timestamp_us;
        Self {
            agent_id: r.agent_id,
            timestamp_us: ts,
            sensor_pose: Pose2::new(r.pose[0], r.pose[1], r.pose[2]),
            points: r.points,
            boxes: r
                .boxes
                .into_iter()
                .map(|b| b.to_annotation(ts))
                .collect(),
        }
    }
}

pub fn write_frames(path: &Path, frames: &[PointCloudFrame]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for f in frames {
        serde_json::to_writer(&mut w, &FrameRecord::from(f))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Vec<PointCloudFrame>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line)?;
        out.push(rec.into());
    }
    Ok(out)
}
