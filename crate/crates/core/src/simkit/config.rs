use serde::{Deserialize, Serialize};

use crate::constants::{BASE_CELL_SIZE, COOP_FRAMES};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, OrientedBox, Pose2};

/// Kinematic model shared by objects and sensor platforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    #[default]
    ConstantVelocity,
    ConstantTurn,
}

/// Closed-form pose after `t` seconds.
pub fn pose_at(initial: &Pose2, kind: MotionKind, speed: f64, yaw_rate: f64, t: f64) -> Pose2 {
    let yaw0 = initial.yaw;
    match kind {
        MotionKind::ConstantTurn if yaw_rate.abs() > 1e-12 => {
            let yaw = yaw0 + yaw_rate * t;
            let r = speed / yaw_rate;
            Pose2::new(
                initial.x + r * (yaw.sin() - yaw0.sin()),
                initial.y - r * (yaw.cos() - yaw0.cos()),
                normalize_angle(yaw),
            )
        }
        _ => Pose2::new(
            initial.x + speed * t * yaw0.cos(),
            initial.y + speed * t * yaw0.sin(),
            yaw0,
        ),
    }
}

/// Per-message delay model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencySpec {
    Fixed { ms: f64 },
    Uniform { lo_ms: f64, hi_ms: f64 },
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec::Fixed { ms: 0.0 }
    }
}

impl LatencySpec {
    pub fn fixed_ms(ms: f64) -> Self {
        LatencySpec::Fixed { ms }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LatencySpec::Fixed { ms } if !(ms >= 0.0 && ms.is_finite()) => {
                Err(Error::Config(format!("negative or invalid delay {ms} ms")))
            }
            LatencySpec::Uniform { lo_ms, hi_ms }
                if !(lo_ms >= 0.0 && hi_ms >= lo_ms && hi_ms.is_finite()) =>
            {
                Err(Error::Config(format!("invalid uniform delay [{lo_ms}, {hi_ms}] ms")))
            }
            _ => Ok(()),
        }
    }

    /// Parses `400` (fixed) or `0:400` (uniform), in milliseconds.
    pub fn parse(text: &str) -> Result<Self> {
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad latency `{text}`")))
        };
        let spec = match text.split_once(':') {
            Some((lo, hi)) => LatencySpec::Uniform {
                lo_ms: num(lo)?,
                hi_ms: num(hi)?,
            },
            None => LatencySpec::Fixed { ms: num(text)? },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Nominal delay used for labels and bounds: fixed value or upper bound.
    pub fn max_ms(&self) -> f64 {
        match *self {
            LatencySpec::Fixed { ms } => ms,
            LatencySpec::Uniform { hi_ms, .. } => hi_ms,
        }
    }
}

fn default_capacity() -> usize {
    COOP_FRAMES
}

fn default_frequency() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub agent_id: String,
    #[serde(default)]
    pub ego: bool,
    pub initial_pose: Pose2,
    #[serde(default)]
    pub motion: MotionKind,
    #[serde(default)]
    pub speed: f64,
    #[serde(default)]
    pub yaw_rate: f64,
    #[serde(default = "default_frequency")]
    pub frequency_hz: f64,
    #[serde(default = "default_capacity")]
    pub cache_capacity: usize,
    #[serde(default)]
    pub latency: LatencySpec,
    /// Overrides the scenario-wide sensor range.
    #[serde(default)]
    pub sensor_range_m: Option<f64>,
}

impl AgentConfig {
    pub fn pose_at_us(&self, t_us: i64) -> Pose2 {
        pose_at(
            &self.initial_pose,
            self.motion,
            self.speed,
            self.yaw_rate,
            t_us as f64 * 1e-6,
        )
    }

    pub fn period_us(&self) -> i64 {
        (1e6 / self.frequency_hz).round() as i64
    }

    /// Capture timestamp of frame `k`.
    pub fn frame_time_us(&self, k: i64) -> i64 {
        (k as f64 * 1e6 / self.frequency_hz).round() as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectConfig {
    pub object_id: u32,
    pub initial: OrientedBox,
    #[serde(default)]
    pub motion: MotionKind,
    #[serde(default)]
    pub speed: f64,
    #[serde(default)]
    pub yaw_rate: f64,
}

impl ObjectConfig {
    /// World box at `t_us`, ignoring despawn.
    pub fn box_at_us(&self, t_us: i64) -> OrientedBox {
        let p0 = Pose2::new(self.initial.cx, self.initial.cy, self.initial.yaw);
        let p = pose_at(&p0, self.motion, self.speed, self.yaw_rate, t_us as f64 * 1e-6);
        OrientedBox {
            cx: p.x,
            cy: p.y,
            yaw: p.yaw,
            ..self.initial
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldBounds {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

impl Default for WorldBounds {
    fn default() -> Self {
        Self {
            min_x: -200.0,
            max_x: 200.0,
            min_y: -200.0,
            max_y: 200.0,
        }
    }
}

impl WorldBounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub range_m: f64,
    /// Ground height in the sensor frame.
    pub ground_z: f64,
    pub object_height: f64,
    pub noise_sigma: f64,
    /// Points per square meter sampled on object footprints.
    pub footprint_density: f64,
    /// Points per meter sampled on object perimeters.
    pub perimeter_density: f64,
    pub clutter_points: usize,
    pub occlusion: bool,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            range_m: 30.0,
            ground_z: -1.7,
            object_height: 1.6,
            noise_sigma: 0.02,
            footprint_density: 6.0,
            perimeter_density: 8.0,
            clutter_points: 120,
            occlusion: false,
        }
    }
}

/// BEV raster extent around each sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RangeConfig {
    pub half_x: f64,
    pub half_y: f64,
    pub base_cell: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for RangeConfig {
    fn default() -> Self {
        Self {
            half_x: 32.0,
            half_y: 32.0,
            base_cell: BASE_CELL_SIZE,
            z_min: -3.0,
            z_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default)]
    pub world: WorldBounds,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub range: RangeConfig,
    pub agents: Vec<AgentConfig>,
    pub objects: Vec<ObjectConfig>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let egos = self.agents.iter().filter(|a| a.ego).count();
        if egos != 1 {
            return Err(Error::Config(format!("expected exactly one ego agent, found {egos}")));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for a in &self.agents {
            if !(a.frequency_hz > 0.0) {
                return Err(Error::Config(format!("agent {}: frequency must be positive", a.agent_id)));
            }
            if a.cache_capacity < 1 {
                return Err(Error::Config(format!("agent {}: cache capacity must be >= 1", a.agent_id)));
            }
            if !ids.insert(a.agent_id.clone()) {
                return Err(Error::Config(format!("duplicate agent id {}", a.agent_id)));
            }
            a.latency.validate()?;
        }
        let mut oids = std::collections::BTreeSet::new();
        for o in &self.objects {
            if !(o.initial.length > 0.0 && o.initial.width > 0.0) {
                return Err(Error::Config(format!("object {}: box extent must be positive", o.object_id)));
            }
            if !oids.insert(o.object_id) {
                return Err(Error::Config(format!("duplicate object id {}", o.object_id)));
            }
        }
        let grid_ok = |half: f64| {
            let cells = (2.0 * half / self.range.base_cell).round() as usize;
            cells % 32 == 0
        };
        if !grid_ok(self.range.half_x) || !grid_ok(self.range.half_y) {
            return Err(Error::Config(
                "detection range must span a multiple of 32 base cells".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn ego(&self) -> &AgentConfig {
        self.agents.iter().find(|a| a.ego).expect("validated: one ego")
    }

    pub fn agent(&self, id: &str) -> Option<&AgentConfig> {
        self.agents.iter().find(|a| a.agent_id == id)
    }

    pub fn duration_us(&self) -> i64 {
        (self.duration_s * 1e6).round() as i64
    }

    pub fn sensor_range(&self, agent: &AgentConfig) -> f64 {
        agent.sensor_range_m.unwrap_or(self.sensor.range_m)
    }
}
