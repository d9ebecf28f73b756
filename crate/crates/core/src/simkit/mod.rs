//! Synthetic multi-agent scenes: moving boxes, per-agent point sampling and
//! latency-delayed message delivery.
//!
//! Sampling is geometric (footprint and perimeter points with Gaussian noise),
//! not ray-traced. Generation is single-threaded per scenario so that a seed
//! fully determines the output.

mod config;
mod delivery;
mod io;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use config::{
    pose_at, AgentConfig, LatencySpec, MotionKind, ObjectConfig, RangeConfig, ScenarioConfig,
    SensorConfig, WorldBounds,
};
pub use delivery::{schedule_delivery, DelayedMessage, Timestamped};
pub use io::{read_frames, write_frames, BoxRecord, FrameRecord};

use crate::error::Result;
use crate::geometry::{normalize_angle, OrientedBox, Pose2};

/// Object box with identity and capture time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub object_id: u32,
    pub timestamp_us: i64,
    pub bbox: OrientedBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    pub agent_id: String,
    pub timestamp_us: i64,
    pub sensor_pose: Pose2,
    /// Sensor-frame points.
    pub points: Vec<[f64; 3]>,
    /// Sensor-frame boxes of objects that produced points.
    pub boxes: Vec<BoxAnnotation>,
}

/// Generated scene: config plus every agent's frame stream.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub frames: BTreeMap<String, Vec<PointCloudFrame>>,
    /// Despawn time per object that left the world bounds.
    pub despawned: BTreeMap<u32, i64>,
}

const DESPAWN_STEP_US: i64 = 10_000;

/// First time (on a 10 ms grid) the object's center leaves the world bounds.
pub fn despawn_time(cfg: &ScenarioConfig, obj: &ObjectConfig) -> Option<i64> {
    let end = cfg.duration_us();
    let mut t = 0;
    while t <= end {
        let b = obj.box_at_us(t);
        if !cfg.world.contains(b.cx, b.cy) {
            return Some(t);
        }
        t += DESPAWN_STEP_US;
    }
    None
}

fn despawn_table(cfg: &ScenarioConfig) -> BTreeMap<u32, i64> {
    let mut table = BTreeMap::new();
    for obj in &cfg.objects {
        if let Some(t) = despawn_time(cfg, obj) {
            log::info!("object {} despawned at {} us (left world bounds)", obj.object_id, t);
            table.insert(obj.object_id, t);
        }
    }
    table
}

/// World-frame boxes alive at `t_us`.
pub fn world_boxes_at(
    cfg: &ScenarioConfig,
    despawned: &BTreeMap<u32, i64>,
    t_us: i64,
) -> Vec<(u32, OrientedBox)> {
    cfg.objects
        .iter()
        .filter(|o| despawned.get(&o.object_id).is_none_or(|&d| t_us < d))
        .map(|o| (o.object_id, o.box_at_us(t_us)))
        .collect()
}

/// Objects an agent can see at `t_us`: center within sensor range, optionally
/// minus those hidden behind a nearer object's angular extent.
pub fn visible_boxes(
    cfg: &ScenarioConfig,
    despawned: &BTreeMap<u32, i64>,
    agent: &AgentConfig,
    t_us: i64,
) -> Vec<(u32, OrientedBox)> {
    let pose = agent.pose_at_us(t_us);
    let range = cfg.sensor_range(agent);
    let mut vis: Vec<(u32, OrientedBox, f64)> = world_boxes_at(cfg, despawned, t_us)
        .into_iter()
        .filter_map(|(id, b)| {
            let d = (b.cx - pose.x).hypot(b.cy - pose.y);
            (d <= range).then_some((id, b, d))
        })
        .collect();
    if cfg.sensor.occlusion {
        vis.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
        let mut spans: Vec<(f64, f64)> = Vec::new();
        let mut kept = Vec::new();
        for (id, b, _) in vis {
            let center = (b.cy - pose.y).atan2(b.cx - pose.x);
            let hidden = spans
                .iter()
                .any(|&(c, half)| normalize_angle(center - c).abs() < half);
            let half = b
                .corners()
                .iter()
                .map(|p| normalize_angle((p[1] - pose.y).atan2(p[0] - pose.x) - center).abs())
                .fold(0.0, f64::max);
            if !hidden {
                spans.push((center, half));
                kept.push((id, b, 0.0));
            }
        }
        vis = kept;
    }
    vis.into_iter().map(|(id, b, _)| (id, b)).collect()
}

fn agent_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1))
}

fn sample_object_points<R: Rng>(
    b: &OrientedBox,
    sensor: &SensorConfig,
    rng: &mut R,
    out: &mut Vec<[f64; 3]>,
) {
    let z = |rng: &mut R| sensor.ground_z + rng.random::<f64>() * sensor.object_height;
    let (s, c) = b.yaw.sin_cos();
    let to_world = |u: f64, v: f64| [b.cx + c * u - s * v, b.cy + s * u + c * v];
    let n_foot = (sensor.footprint_density * b.area()).round() as usize;
    for _ in 0..n_foot {
        let u = (rng.random::<f64>() - 0.5) * b.length;
        let v = (rng.random::<f64>() - 0.5) * b.width;
        let [x, y] = to_world(u, v);
        out.push([x, y, z(rng)]);
    }
    let perimeter = 2.0 * (b.length + b.width);
    let n_edge = (sensor.perimeter_density * perimeter).round() as usize;
    for _ in 0..n_edge {
        let mut d = rng.random::<f64>() * perimeter;
        let (hl, hw) = (b.length / 2.0, b.width / 2.0);
        let (u, v) = if d < b.length {
            (d - hl, -hw)
        } else if {
            d -= b.length;
            d < b.width
        } {
            (hl, d - hw)
        } else if {
            d -= b.width;
            d < b.length
        } {
            (hl - d, hw)
        } else {
            d -= b.length;
            (-hl, hw - d)
        };
        let [x, y] = to_world(u, v);
        out.push([x, y, z(rng)]);
    }
}

/// Frame streams for every agent; deterministic given `cfg.seed`.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let despawned = despawn_table(cfg);
    let noise = Normal::new(0.0, cfg.sensor.noise_sigma.max(0.0)).expect("finite sigma");
    let mut frames = BTreeMap::new();
    for (index, agent) in cfg.agents.iter().enumerate() {
        let mut rng = agent_rng(cfg.seed, index);
        let range = cfg.sensor_range(agent);
        let mut stream = Vec::new();
        let mut k = 0;
        loop {
            let t_us = agent.frame_time_us(k);
            if t_us > cfg.duration_us() {
                break;
            }
            let pose = agent.pose_at_us(t_us);
            let inv = pose.inverse();
            let mut world_pts = Vec::new();
            let mut boxes = Vec::new();
            for (id, b) in visible_boxes(cfg, &despawned, agent, t_us) {
                let before = world_pts.len();
                sample_object_points(&b, &cfg.sensor, &mut rng, &mut world_pts);
                if world_pts.len() > before {
                    boxes.push(BoxAnnotation {
                        object_id: id,
                        timestamp_us: t_us,
                        bbox: b.transformed(&inv),
                    });
                }
            }
            for _ in 0..cfg.sensor.clutter_points {
                let r = range * rng.random::<f64>().sqrt();
                let a = rng.random::<f64>() * 2.0 * PI;
                let z = cfg.sensor.ground_z + rng.random::<f64>() * 0.2;
                let [x, y] = pose.apply([r * a.cos(), r * a.sin()]);
                world_pts.push([x, y, z]);
            }
            let points = world_pts
                .into_iter()
                .map(|[x, y, z]| {
                    let [lx, ly] = inv.apply([x, y]);
                    [
                        lx + noise.sample(&mut rng),
                        ly + noise.sample(&mut rng),
                        z + noise.sample(&mut rng),
                    ]
                })
                .collect();
            stream.push(PointCloudFrame {
                agent_id: agent.agent_id.clone(),
                timestamp_us: t_us,
                sensor_pose: pose,
                points,
                boxes,
            });
            k += 1;
        }
        frames.insert(agent.agent_id.clone(), stream);
    }
    Ok(Scenario {
        config: cfg.clone(),
        frames,
        despawned,
    })
}

/// Ground-truth boxes at `t_us` expressed in the ego sensor frame at `t_us`.
pub fn ground_truth_at(cfg: &ScenarioConfig, t_us: i64) -> Vec<BoxAnnotation> {
    let despawned = despawn_table(cfg);
    ground_truth_with(cfg, &despawned, t_us)
}

pub(crate) fn ground_truth_with(
    cfg: &ScenarioConfig,
    despawned: &BTreeMap<u32, i64>,
    t_us: i64,
) -> Vec<BoxAnnotation> {
    let inv = cfg.ego().pose_at_us(t_us).inverse();
    world_boxes_at(cfg, despawned, t_us)
        .into_iter()
        .map(|(id, b)| BoxAnnotation {
            object_id: id,
            timestamp_us: t_us,
            bbox: b.transformed(&inv),
        })
        .collect()
}

impl Scenario {
    pub fn ground_truth_at(&self, t_us: i64) -> Vec<BoxAnnotation> {
        ground_truth_with(&self.config, &self.despawned, t_us)
    }

    /// Boxes an agent sees at each timestamp in `times_us`, expressed in the
    /// ego frame at `t_us`. Source annotations for trajectory ground truth.
    pub fn agent_annotations(
        &self,
        agent_id: &str,
        times_us: &[i64],
        t_us: i64,
    ) -> Vec<Vec<BoxAnnotation>> {
        let Some(agent) = self.config.agent(agent_id) else {
            return vec![Vec::new(); times_us.len()];
        };
        let inv = self.config.ego().pose_at_us(t_us).inverse();
        times_us
            .iter()
            .map(|&u| {
                visible_boxes(&self.config, &self.despawned, agent, u)
                    .into_iter()
                    .map(|(id, b)| BoxAnnotation {
                        object_id: id,
                        timestamp_us: u,
                        bbox: b.transformed(&inv),
                    })
                    .collect()
            })
            .collect()
    }

    /// Objects visible to at least one agent at `t_us`.
    pub fn visible_to_any(&self, t_us: i64) -> std::collections::BTreeSet<u32> {
        self.config
            .agents
            .iter()
            .flat_map(|a| visible_boxes(&self.config, &self.despawned, a, t_us))
            .map(|(id, _)| id)
            .collect()
    }
}
