//! The moving car seen by the cooperating agent 400 ms late: where the
//! feature peak sits before and after oracle alignment, and what that does to AP.

use latalign::harness::fixtures::motion_fixture;
use latalign::harness::{run_pipeline, EncodedScenario, Mode, ModelParams, PipelineConfig, Runner};
use latalign::simkit::generate_scenario;

fn main() -> latalign::Result<()> {
    let params = ModelParams::seeded(0, 2);
    let enc = EncodedScenario::new(generate_scenario(&motion_fixture())?, &params)?;
    let t = 1_000_000;
    let gt = enc.ground_truth(t);
    let target = enc.feature_grid.continuous_cell(gt[0].bbox.cx, gt[0].bbox.cy);
    println!("car at ({:.2}, {:.2}), cell {:.2?}", gt[0].bbox.cx, gt[0].bbox.cy, target);

    for mode in [Mode::Unaligned, Mode::Oracle] {
        let cfg = PipelineConfig::default().with_mode(mode).with_latency_ms(400.0);
        let mut runner = Runner::new(&enc, cfg, &params)?;
        let mut frame = None;
        for ts in enc.ego_times().into_iter().filter(|&ts| ts <= t) {
            frame = Some(runner.step(ts)?);
        }
        let frame = frame.expect("ego frames up to t");
        let coop = frame.agents.iter().find(|a| a.agent_id == "coop").expect("coop delivered");
        let p = coop.aligned.peak_position();
        let d = (p[0] - target[0]).hypot(p[1] - target[1]);
        println!(
            "{mode:>9}: newest coop frame {} us, peak {:.2?}, displacement {d:.2} cells",
            coop.newest_source_us, p
        );

        let run = run_pipeline(&enc, &cfg, &params, None)?;
        println!("{:>9}  AP50 {:.3}  AP70 {:.3}", "", run.result.ap50, run.result.ap70);
    }
    Ok(())
}
