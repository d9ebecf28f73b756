use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latalign::harness::fixtures::{motion_fixture, standard_suite, static_fixture};
use latalign::harness::io::{pair_frames, read_detections, read_ground_truth, write_pr_csv};
use latalign::harness::render::{overlay_offsets, render_field, save_png};
use latalign::harness::{
    evaluate_frames, latency_sweep, run_pipeline, write_sweep_csv, EncodedScenario, Mode, ModelParams, PipelineConfig,
};
use latalign::offsets::read_offsets_jsonl;
use latalign::simkit::{generate_scenario, write_frames, LatencySpec, ScenarioConfig};
use latalign::trajfield::read_field_dump;
use latalign::{Error, Result};

#[derive(Parser)]
#[command(name = "latalign", version, about = "Latency-robust cooperative BEV perception")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate point-cloud frames for a scenario.
    Simulate(SimulateArgs),
    /// Run the alignment pipeline on one scenario and dump its outputs.
    Align(RunArgs),
    /// Evaluate dumped detections against dumped ground truth.
    Eval(EvalArgs),
    /// AP table over modes and latencies.
    Sweep(SweepArgs),
    /// PNGs of dumped trajectory fields with their offsets.
    Render(RenderArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Fixture name (motion, static, lanes_a..lanes_e) or a scenario JSON file.
    #[arg(long, default_value = "motion")]
    scenario: String,
    /// Overrides every non-ego agent's delay: `400` or `0:400`.
    #[arg(long = "latency-ms")]
    latency_ms: Option<String>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out/sim")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "motion")]
    scenario: String,
    #[arg(long = "latency-ms")]
    latency_ms: Option<String>,
    #[arg(long, default_value = "oracle")]
    mode: Mode,
    /// Seed of the model weights and of the delivery process.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/align")]
    out: PathBuf,
    #[arg(long = "ego-frames", default_value_t = 2)]
    ego_frames: usize,
    #[arg(long = "coop-frames", default_value_t = 4)]
    coop_frames: usize,
    /// Parameter bundle to load instead of seeded weights.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding detections.jsonl and ground_truth.jsonl.
    #[arg(long, default_value = "out/align")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Fixture name, `standard` for the five-scene suite, or a scenario JSON file.
    #[arg(long, default_value = "standard")]
    scenario: String,
    /// Comma-separated fixed delays.
    #[arg(long = "latency-ms", default_value = "0,100,200,300,400", value_delimiter = ',')]
    latency_ms: Vec<u32>,
    #[arg(long, default_values = ["oracle", "unaligned"], value_delimiter = ',')]
    mode: Vec<Mode>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/sweep")]
    out: PathBuf,
    #[arg(long = "ego-frames", default_value_t = 2)]
    ego_frames: usize,
    #[arg(long = "coop-frames", default_value_t = 4)]
    coop_frames: usize,
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Directory written by `align`.
    #[arg(long, default_value = "out/align")]
    out: PathBuf,
    /// Pixels per cell.
    #[arg(long, default_value_t = 8)]
    scale: u32,
}

fn resolve(name: &str) -> Result<Vec<ScenarioConfig>> {
    let fixtures = std::iter::once(motion_fixture())
        .chain(std::iter::once(static_fixture()))
        .chain(standard_suite());
    if name == "standard" {
        return Ok(standard_suite());
    }
    if let Some(cfg) = fixtures.into_iter().find(|c| c.name == name) {
        return Ok(vec![cfg]);
    }
    let path = Path::new(name);
    if path.exists() {
        return Ok(vec![ScenarioConfig::load(path)?]);
    }
    Err(Error::Config(format!("unknown scenario `{name}`")))
}

fn single(name: &str) -> Result<ScenarioConfig> {
    let mut all = resolve(name)?;
    if all.len() != 1 {
        return Err(Error::Config(format!("`{name}` names a suite, expected one scenario")));
    }
    Ok(all.remove(0))
}

fn with_latency(mut cfg: ScenarioConfig, latency: Option<LatencySpec>) -> ScenarioConfig {
    if let Some(l) = latency {
        for a in cfg.agents.iter_mut().filter(|a| !a.ego) {
            a.latency = l;
        }
    }
    cfg
}

fn load_params(path: Option<&Path>, seed: u64, agents: usize) -> Result<ModelParams> {
    match path {
        Some(p) => ModelParams::load(p),
        None => Ok(ModelParams::seeded(seed, agents)),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let latency = args.latency_ms.as_deref().map(LatencySpec::parse).transpose()?;
    let mut cfg = with_latency(single(&args.scenario)?, latency);
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let scenario = generate_scenario(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("scenario.json"), cfg.to_json()?)?;
    for (agent, frames) in &scenario.frames {
        write_frames(&args.out.join(format!("frames_{agent}.jsonl")), frames)?;
        println!("{agent}: {} frames", frames.len());
    }
    Ok(())
}

fn align(args: RunArgs) -> Result<()> {
    let cfg = single(&args.scenario)?;
    let params = load_params(args.params.as_deref(), args.seed, cfg.agents.len())?;
    let run_cfg = PipelineConfig {
        latency: args.latency_ms.as_deref().map(LatencySpec::parse).transpose()?,
        mode: args.mode,
        ego_frames: args.ego_frames,
        coop_frames: args.coop_frames,
        seed: args.seed,
        ..PipelineConfig::default()
    };
    let enc = EncodedScenario::new(generate_scenario(&cfg)?, &params)?;
    let run = run_pipeline(&enc, &run_cfg, &params, Some(&args.out))?;
    println!("{}", serde_json::to_string_pretty(&run.result)?);
    log::info!("runtime {:.0} ms", run.result.runtime_ms);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let dets = read_detections(&args.out.join("detections.jsonl"))?;
    let gts = read_ground_truth(&args.out.join("ground_truth.jsonl"))?;
    let frames = pair_frames(&dets, &gts);
    let r50 = evaluate_frames(&frames, 0.5);
    let r70 = evaluate_frames(&frames, 0.7);
    if r50.no_gt {
        log::warn!("no ground truth boxes in {}", args.out.display());
    }
    write_pr_csv(&args.out.join("pr50.csv"), &r50.pr_curve)?;
    println!("ap50 {:.4} ap70 {:.4} n_gt {} n_det {}", r50.ap, r70.ap, r50.n_gt, r50.n_det);
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let configs = resolve(&args.scenario)?;
    let agents = configs.iter().map(|c| c.agents.len()).max().unwrap_or(2);
    let params = load_params(args.params.as_deref(), args.seed, agents)?;
    let suite = configs
        .into_iter()
        .map(|c| EncodedScenario::new(generate_scenario(&c)?, &params))
        .collect::<Result<Vec<_>>>()?;
    let base = PipelineConfig {
        ego_frames: args.ego_frames,
        coop_frames: args.coop_frames,
        seed: args.seed,
        ..PipelineConfig::default()
    };
    let rows = latency_sweep(&suite, &args.mode, &args.latency_ms, &base, &params)?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("sweep.csv");
    write_sweep_csv(&path, &rows)?;
    for r in &rows {
        println!("{:<10} {:>4} ms  ap50 {:.4}  ap70 {:.4}", r.mode, r.latency_ms, r.ap50, r.ap70);
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

fn render(args: RenderArgs) -> Result<()> {
    let fields = args.out.join("fields");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&fields)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "trfd"))
        .collect();
    entries.sort();
    let png_dir = args.out.join("png");
    for path in &entries {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("field").to_string();
        let dump = read_field_dump(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let mut img = render_field(&dump, args.scale);
        let offs = args.out.join("offsets").join(format!("{stem}.jsonl"));
        if offs.exists() {
            let sets = read_offsets_jsonl(std::io::BufReader::new(std::fs::File::open(offs)?))?;
            overlay_offsets(&mut img, &sets, dump.position.dim().0, args.scale);
        }
        save_png(&img, &png_dir.join(format!("{stem}.png")))?;
    }
    println!("{} images in {}", entries.len(), png_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LATALIGN_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Align(a) => align(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Render(a) => render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
