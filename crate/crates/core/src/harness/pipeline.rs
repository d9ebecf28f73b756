//! End-to-end run over one scenario: delivery, caches, alignment, fusion,
//! detection and evaluation at every ego timestamp.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{align_agent, apply_gate, head_gate, AttentionStack};
use crate::constants::{COOP_FRAMES, EGO_FRAMES, HEATMAP_SIGMA_CELLS, NUM_OFFSETS};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::fusion::{decode_detections, fuse_agents, DecodeConfig, Detection, FusionParams};
use crate::geometry::GridSpec;
use crate::harness::io::{write_detections_frame, write_ground_truth_frame, write_pr_csv};
use crate::harness::metrics::{evaluate_frames, FrameEval, PrPoint};
use crate::harness::model::ModelParams;
use crate::offsets::{gt_offsets_map, predict_offsets, write_offsets_jsonl, OffsetSet};
use crate::pillars::frame_features;
use crate::simkit::{schedule_delivery, DelayedMessage, LatencySpec, Scenario};
use crate::temporal::{assemble_history, collapse, history_stack, AgentCache, HistoryContext};
use crate::trajfield::{
    build_trajectories, predict_field, rasterize_field, window_times, write_field_dump, HeatmapMode, Trajectory,
    TrajectoryField,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Ground-truth fields and offsets with analytic attention.
    Oracle,
    /// Predicted fields and offsets with the bundle's weights.
    Predicted,
    /// Newest cached map per agent, ego-motion compensated only.
    Unaligned,
    /// Ego agent alone.
    Single,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Oracle, Mode::Predicted, Mode::Unaligned, Mode::Single];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Oracle => "oracle",
            Mode::Predicted => "predicted",
            Mode::Unaligned => "unaligned",
            Mode::Single => "single",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    /// Delay of every non-ego agent; `None` keeps the scenario's own.
    pub latency: Option<LatencySpec>,
    pub mode: Mode,
    pub ego_frames: usize,
    pub coop_frames: usize,
    pub seed: u64,
    /// First ego timestamp that is evaluated.
    pub eval_start_us: i64,
    pub decode: DecodeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            latency: None,
            mode: Mode::Oracle,
            ego_frames: EGO_FRAMES,
            coop_frames: COOP_FRAMES,
            seed: 0,
            eval_start_us: 700_000,
            decode: DecodeConfig {
                refine: true,
                ..DecodeConfig::default()
            },
        }
    }
}

impl PipelineConfig {
    pub fn with_latency_ms(mut self, ms: f64) -> Self {
        self.latency = Some(LatencySpec::fixed_ms(ms));
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn latency_label(&self) -> String {
        match self.latency {
            None => "scenario".into(),
            Some(LatencySpec::Fixed { ms }) => format!("{ms}"),
            Some(LatencySpec::Uniform { lo_ms, hi_ms }) => format!("{lo_ms}:{hi_ms}"),
        }
    }
}

/// Scenario with every frame already encoded to features.
#[derive(Debug, Clone)]
pub struct EncodedScenario {
    pub scenario: Scenario,
    pub base_grid: GridSpec,
    pub feature_grid: GridSpec,
    pub features: BTreeMap<String, Vec<FeatureMap>>,
}

impl EncodedScenario {
    pub fn new(scenario: Scenario, params: &ModelParams) -> Result<Self> {
        let r = scenario.config.range;
        let base_grid = GridSpec::centered(r.half_x, r.half_y, r.base_cell);
        let feature_grid = crate::pillars::feature_grid(&base_grid);
        let mut features = BTreeMap::new();
        for (agent, frames) in &scenario.frames {
            let maps = frames
                .par_iter()
                .map(|f| frame_features(f, &base_grid, (r.z_min, r.z_max), &params.encoder, &params.backbone))
                .collect::<Result<Vec<_>>>()?;
            features.insert(agent.clone(), maps);
        }
        Ok(Self {
            scenario,
            base_grid,
            feature_grid,
            features,
        })
    }

    /// Agent ids with the ego first, then config order.
    pub fn agent_order(&self) -> Vec<String> {
        let cfg = &self.scenario.config;
        let mut ids = vec![cfg.ego().agent_id.clone()];
        ids.extend(cfg.agents.iter().filter(|a| !a.ego).map(|a| a.agent_id.clone()));
        ids
    }

    pub fn ego_times(&self) -> Vec<i64> {
        let ego = &self.scenario.config.ego().agent_id;
        self.features[ego].iter().map(|f| f.timestamp_us).collect()
    }

    /// Evaluation ground truth: visible to some agent and inside the grid.
    pub fn ground_truth(&self, t_us: i64) -> Vec<crate::simkit::BoxAnnotation> {
        let seen = self.scenario.visible_to_any(t_us);
        self.scenario
            .ground_truth_at(t_us)
            .into_iter()
            .filter(|g| seen.contains(&g.object_id) && self.feature_grid.cell_of(g.bbox.cx, g.bbox.cy).is_some())
            .collect()
    }
}

/// Per-agent intermediate results at one ego timestamp.
#[derive(Debug, Clone)]
pub struct AgentAlignment {
    pub agent_id: String,
    /// Newest cached map warped to the ego frame at t.
    pub unaligned: FeatureMap,
    /// Map after the mode's alignment.
    pub aligned: FeatureMap,
    /// Ground-truth field in oracle mode, prediction otherwise.
    pub field: TrajectoryField,
    pub offsets: Vec<OffsetSet>,
    pub trajectories: Vec<Trajectory>,
    pub newest_source_us: i64,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub t_us: i64,
    pub agents: Vec<AgentAlignment>,
    pub fused: FeatureMap,
    pub detections: Vec<Detection>,
}

/// Frame caches fed by delayed delivery, advanced in time order.
pub struct Runner<'a> {
    pub enc: &'a EncodedScenario,
    pub cfg: PipelineConfig,
    pub params: &'a ModelParams,
    order: Vec<String>,
    queues: Vec<Vec<DelayedMessage<&'a FeatureMap>>>,
    cursors: Vec<usize>,
    caches: Vec<AgentCache>,
}

impl<'a> Runner<'a> {
    pub fn new(enc: &'a EncodedScenario, cfg: PipelineConfig, params: &'a ModelParams) -> Result<Self> {
        let scfg = &enc.scenario.config;
        let mut order = enc.agent_order();
        if cfg.mode == Mode::Single {
            order.truncate(1);
        }
        let mut queues = Vec::new();
        let mut caches = Vec::new();
        for (i, id) in order.iter().enumerate() {
            let agent = scfg.agent(id).expect("agent order from config");
            let spec = match (agent.ego, cfg.latency) {
                (false, Some(s)) => s,
                _ => agent.latency,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xA076_1D64_78BD_642Fu64.wrapping_mul(i as u64 + 1)));
            queues.push(schedule_delivery(enc.features[id].iter(), &spec, &mut rng));
            let cap = if agent.ego { cfg.ego_frames } else { cfg.coop_frames };
            caches.push(AgentCache::new(id.clone(), cap)?);
        }
        Ok(Self {
            enc,
            cfg,
            params,
            cursors: vec![0; order.len()],
            order,
            queues,
            caches,
        })
    }

    fn deliver_until(&mut self, t_us: i64) {
        for (i, q) in self.queues.iter().enumerate() {
            while self.cursors[i] < q.len() && q[self.cursors[i]].arrives_at <= t_us {
                let msg = &q[self.cursors[i]];
                if let Err(e) = self.caches[i].insert(msg.payload.clone()) {
                    log::debug!("dropping late arrival: {e}");
                }
                self.cursors[i] += 1;
            }
        }
    }

    fn align_one(&self, i: usize, t_us: i64) -> Result<Option<AgentAlignment>> {
        let cache = &self.caches[i];
        let Some(newest) = cache.newest() else {
            return Ok(None);
        };
        let scfg = &self.enc.scenario.config;
        let ego = scfg.ego();
        let agent = scfg.agent(&self.order[i]).expect("known agent");
        let grid = &self.enc.feature_grid;
        let reference_us = self.caches[0].newest().map_or(t_us, |f| f.timestamp_us);
        let ctx = HistoryContext {
            ego_pose_at_t: ego.pose_at_us(t_us),
            t_us,
            reference_us,
            period_us: agent.period_us(),
            grid,
            ego_id: &ego.agent_id,
        };
        let history = assemble_history(cache, &ctx, |ts| Some(agent.pose_at_us(ts)), &self.params.temporal)?;
        let unaligned = history.maps.last().expect("non-empty history").clone();
        let newest_source_us = newest.timestamp_us;
        let times = window_times(t_us, t_us - newest_source_us, agent.frequency_hz, cache.capacity());
        let annotations = self.enc.scenario.agent_annotations(&agent.agent_id, &times, t_us);
        let trajectories = build_trajectories(&annotations, t_us, agent.period_us())?;
        let gt_field = rasterize_field(&trajectories, grid, HeatmapMode::Gaussian);
        let c = unaligned.channels();
        let (aligned, field, offsets) = match self.cfg.mode {
            Mode::Unaligned | Mode::Single => (unaligned.clone(), gt_field, Vec::new()),
            Mode::Oracle => {
                let offs = gt_offsets_map(&gt_field, NUM_OFFSETS);
                let mut aligned = align_agent(&collapse(&history)?, &AttentionStack::oracle(c), |_, _| Ok(offs.clone()))?;
                let heads: BTreeMap<u32, [f64; 2]> = trajectories
                    .iter()
                    .filter_map(|tr| tr.newest().map(|s| (tr.object_id, grid.continuous_cell(s.cx, s.cy))))
                    .collect();
                apply_gate(&mut aligned, &head_gate(&gt_field, &heads, HEATMAP_SIGMA_CELLS));
                (aligned, gt_field, offs)
            }
            Mode::Predicted => {
                let stack = history_stack(&history)?;
                let field = predict_field(&stack.view(), grid, &self.params.unet)?;
                let mut first = None;
                let aligned = align_agent(&collapse(&history)?, &self.params.attention, |_, input| {
                    let offs = predict_offsets(input, &field, &self.params.offsets)?;
                    first.get_or_insert_with(|| offs.clone());
                    Ok(offs)
                })?;
                (aligned, field, first.unwrap_or_default())
            }
        };
        Ok(Some(AgentAlignment {
            agent_id: agent.agent_id.clone(),
            unaligned,
            aligned,
            field,
            offsets,
            trajectories,
            newest_source_us,
        }))
    }

    /// Delivers pending messages and processes the ego timestamp `t_us`.
    pub fn step(&mut self, t_us: i64) -> Result<FrameOutput> {
        self.deliver_until(t_us);
        let mut agents = Vec::new();
        for i in 0..self.order.len() {
            if let Some(a) = self.align_one(i, t_us)? {
                agents.push(a);
            }
        }
        let first = agents
            .first()
            .ok_or_else(|| Error::Empty(format!("no agent features at {t_us} us")))?;
        let fused = match self.cfg.mode {
            Mode::Predicted => {
                let maps: Vec<FeatureMap> = self
                    .order
                    .iter()
                    .map(|id| match agents.iter().find(|a| &a.agent_id == id) {
                        Some(a) => a.aligned.clone(),
                        None => first.aligned.with_data(ndarray::Array3::zeros(first.aligned.data.dim())),
                    })
                    .collect();
                fuse_agents(&maps, &self.params.fusion)?
            }
            _ => {
                let maps: Vec<FeatureMap> = agents.iter().map(|a| a.aligned.clone()).collect();
                fuse_agents(&maps, &FusionParams::sum(first.aligned.channels(), maps.len()))?
            }
        };
        let detections = decode_detections(&fused, &self.params.head, &self.cfg.decode)?;
        Ok(FrameOutput {
            t_us,
            agents,
            fused,
            detections,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub scenario: String,
    pub mode: Mode,
    pub latency_ms: String,
    pub ap50: f64,
    pub ap70: f64,
    pub n_gt: usize,
    pub n_det: usize,
    pub pr_curve: Vec<PrPoint>,
    /// Wall-clock time; left out of serialized output so results stay reproducible.
    #[serde(skip)]
    pub runtime_ms: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub result: EvalResult,
    pub frames: Vec<FrameEval>,
}

fn dump_frame(dir: &Path, out: &FrameOutput, gts: &[crate::simkit::BoxAnnotation]) -> Result<()> {
    std::fs::create_dir_all(dir.join("fields"))?;
    std::fs::create_dir_all(dir.join("offsets"))?;
    for a in &out.agents {
        let stem = format!("{}_{}", out.t_us, a.agent_id);
        let file = std::fs::File::create(dir.join("fields").join(format!("{stem}.trfd")))?;
        write_field_dump(&a.field, std::io::BufWriter::new(file))?;
        let covered: Vec<OffsetSet> = a
            .offsets
            .iter()
            .filter(|o| a.field.tag(o.query.0, o.query.1).is_some())
            .cloned()
            .collect();
        let file = std::fs::File::create(dir.join("offsets").join(format!("{stem}.jsonl")))?;
        write_offsets_jsonl(&covered, std::io::BufWriter::new(file))?;
    }
    write_detections_frame(&dir.join("detections.jsonl"), out.t_us, &out.detections)?;
    write_ground_truth_frame(&dir.join("ground_truth.jsonl"), out.t_us, gts)?;
    Ok(())
}

/// Runs every ego timestamp from `cfg.eval_start_us` on and evaluates pooled AP.
pub fn run_pipeline(
    enc: &EncodedScenario,
    cfg: &PipelineConfig,
    params: &ModelParams,
    dump_dir: Option<&Path>,
) -> Result<PipelineRun> {
    let start = Instant::now();
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir)?;
        for name in ["detections.jsonl", "ground_truth.jsonl"] {
            let p = dir.join(name);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
    }
    let mut runner = Runner::new(enc, *cfg, params)?;
    let mut frames = Vec::new();
    for t in enc.ego_times() {
        if t < cfg.eval_start_us {
            runner.deliver_until(t);
            continue;
        }
        let out = runner.step(t).map_err(|e| e.at_frame(t))?;
        let gts = enc.ground_truth(t);
        if let Some(dir) = dump_dir {
            dump_frame(dir, &out, &gts).map_err(|e| e.at_frame(t))?;
        }
        frames.push(FrameEval {
            detections: out.detections,
            ground_truth: gts,
        });
    }
    let r50 = evaluate_frames(&frames, 0.5);
    let r70 = evaluate_frames(&frames, 0.7);
    if let Some(dir) = dump_dir {
        write_pr_csv(&dir.join("pr50.csv"), &r50.pr_curve)?;
    }
    let result = EvalResult {
        scenario: enc.scenario.config.name.clone(),
        mode: cfg.mode,
        latency_ms: cfg.latency_label(),
        ap50: r50.ap,
        ap70: r70.ap,
        n_gt: r50.n_gt,
        n_det: r50.n_det,
        pr_curve: r50.pr_curve,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    if let Some(dir) = dump_dir {
        std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)?)?;
    }
    log::info!(
        "{} {} latency={} ap50={:.4} ap70={:.4} ({:.0} ms)",
        result.scenario,
        result.mode,
        result.latency_ms,
        result.ap50,
        result.ap70,
        result.runtime_ms
    );
    Ok(PipelineRun { result, frames })
}
