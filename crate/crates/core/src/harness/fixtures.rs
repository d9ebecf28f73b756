//! Canonical desk scenarios.
//!
//! Ego at the origin with a short sensor range sees the parked cars next to
//! it; the cooperating agent further up the road sees the traffic lanes.

use crate::geometry::{OrientedBox, Pose2};
use crate::harness::model::{CAR_LENGTH, CAR_WIDTH};
use crate::simkit::{
    AgentConfig, LatencySpec, MotionKind, ObjectConfig, RangeConfig, ScenarioConfig, SensorConfig, WorldBounds,
};

const EGO_RANGE: f64 = 12.0;
const CLUTTER_POINTS: usize = 12;

fn agent(id: &str, ego: bool, pose: Pose2, speed: f64, range: f64) -> AgentConfig {
    AgentConfig {
        agent_id: id.into(),
        ego,
        initial_pose: pose,
        motion: MotionKind::ConstantVelocity,
        speed,
        yaw_rate: 0.0,
        frequency_hz: 10.0,
        cache_capacity: if ego { 2 } else { 4 },
        latency: LatencySpec::default(),
        sensor_range_m: Some(range),
    }
}

fn car(id: u32, x: f64, y: f64, yaw: f64, speed: f64) -> ObjectConfig {
    ObjectConfig {
        object_id: id,
        initial: OrientedBox::new(x, y, yaw, CAR_LENGTH, CAR_WIDTH),
        motion: MotionKind::ConstantVelocity,
        speed,
        yaw_rate: 0.0,
    }
}

fn scenario(name: &str, seed: u64, agents: Vec<AgentConfig>, objects: Vec<ObjectConfig>) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        seed,
        duration_s: 1.5,
        world: WorldBounds::default(),
        sensor: SensorConfig {
            clutter_points: CLUTTER_POINTS,
            ..SensorConfig::default()
        },
        range: RangeConfig::default(),
        agents,
        objects,
    }
}

fn pair(coop_y: f64) -> Vec<AgentConfig> {
    vec![
        agent("ego", true, Pose2::identity(), 0.0, EGO_RANGE),
        agent("coop", false, Pose2::new(0.0, coop_y, 0.0), 0.0, 30.0),
    ]
}

/// One car at 10 m/s seen only by the cooperating agent.
pub fn motion_fixture() -> ScenarioConfig {
    scenario("motion", 101, pair(22.0), vec![car(1, -12.0, 17.0, 0.0, 10.0)])
}

/// Parked cars only.
pub fn static_fixture() -> ScenarioConfig {
    scenario(
        "static",
        102,
        pair(22.0),
        vec![car(1, -6.0, -5.0, 0.0, 0.0), car(2, 5.0, 4.0, 0.0, 0.0), car(3, 18.0, 20.0, 0.0, 0.0)],
    )
}

/// Five scenes with moving lanes and parked cars.
pub fn standard_suite() -> Vec<ScenarioConfig> {
    let pi = std::f64::consts::PI;
    let mut moving_ego = pair(24.0);
    moving_ego[0].speed = 2.0;
    let mut moving_coop = pair(22.0);
    moving_coop[1].speed = 3.0;
    moving_coop[1].initial_pose = Pose2::new(-4.0, 22.0, 0.0);
    vec![
        scenario(
            "lanes_a",
            201,
            pair(22.0),
            vec![
                car(1, -14.0, 16.0, 0.0, 10.0),
                car(2, 12.0, 22.0, pi, 8.0),
                car(3, -5.0, -5.0, 0.0, 0.0),
                car(4, 6.0, 4.0, 0.0, 0.0),
            ],
        ),
        scenario(
            "lanes_b",
            202,
            pair(22.0),
            vec![
                car(1, -16.0, 17.0, 0.0, 12.0),
                car(2, 2.0, 17.0, 0.0, 12.0),
                car(3, 14.0, 24.0, pi, 6.0),
                car(4, 4.0, -6.0, 0.0, 0.0),
            ],
        ),
        scenario(
            "lanes_c",
            203,
            moving_ego,
            vec![
                car(1, -10.0, 18.0, 0.0, 9.0),
                car(2, 16.0, 25.0, pi, 10.0),
                car(3, -3.0, 5.0, 0.0, 0.0),
                car(4, 7.0, -4.0, 0.0, 0.0),
            ],
        ),
        scenario(
            "lanes_d",
            204,
            moving_coop,
            vec![
                car(1, -15.0, 16.0, 0.0, 8.0),
                car(2, 10.0, 22.0, pi, 11.0),
                car(3, -7.0, 3.0, 0.0, 0.0),
            ],
        ),
        scenario(
            "lanes_e",
            205,
            pair(22.0),
            vec![
                car(1, -12.0, 16.0, 0.0, 5.0),
                car(2, 15.0, 21.0, pi, 10.0),
                car(3, -20.0, 26.0, 0.0, 7.0),
                car(4, 5.0, -5.0, 0.0, 0.0),
                car(5, -6.0, 6.0, 0.0, 0.0),
            ],
        ),
    ]
}
