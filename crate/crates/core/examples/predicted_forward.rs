//! The learned path with seeded weights: field predictor, offset generator and
//! the 2-layer attention stack, plus a parameter-file round trip.

use latalign::harness::fixtures::motion_fixture;
use latalign::harness::{EncodedScenario, Mode, ModelParams, PipelineConfig, Runner};
use latalign::simkit::generate_scenario;

fn main() -> latalign::Result<()> {
    let params = ModelParams::seeded(5, 2);
    let path = std::env::temp_dir().join("latalign-params.json");
    params.save(&path)?;
    let loaded = ModelParams::load(&path)?;
    println!("params round trip through {}: {}", path.display(), loaded == params);

    let enc = EncodedScenario::new(generate_scenario(&motion_fixture())?, &loaded)?;
    let cfg = PipelineConfig::default().with_mode(Mode::Predicted).with_latency_ms(300.0);
    let mut runner = Runner::new(&enc, cfg, &loaded)?;
    for t in enc.ego_times().into_iter().take(10) {
        let out = runner.step(t)?;
        let Some(coop) = out.agents.iter().find(|a| a.agent_id == "coop") else {
            println!("t={t} us: no coop frame yet");
            continue;
        };
        let field_max = coop.field.position.iter().cloned().fold(0.0, f64::max);
        let spread: f64 = coop
            .offsets
            .iter()
            .flat_map(|o| {
                o.positions
                    .iter()
                    .map(move |p| (p[0] - o.query.0 as f64).hypot(p[1] - o.query.1 as f64))
            })
            .sum::<f64>()
            / (coop.offsets.len() * 18).max(1) as f64;
        println!(
            "t={t} us: coop frame {} us, field max {field_max:.3}, mean offset {spread:.3} cells, {} boxes",
            coop.newest_source_us,
            out.detections.len()
        );
    }
    Ok(())
}
