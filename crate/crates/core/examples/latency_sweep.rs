//! AP50/AP70 over the five-scene suite for every latency in the evaluation
//! grid, with and without alignment.

use std::time::Instant;

use latalign::constants::LATENCIES_MS;
use latalign::harness::fixtures::standard_suite;
use latalign::harness::{latency_sweep, sweep_csv, EncodedScenario, Mode, ModelParams, PipelineConfig};
use latalign::simkit::generate_scenario;

fn main() -> latalign::Result<()> {
    let start = Instant::now();
    let params = ModelParams::seeded(0, 2);
    let suite = standard_suite()
        .iter()
        .map(|c| EncodedScenario::new(generate_scenario(c)?, &params))
        .collect::<latalign::Result<Vec<_>>>()?;
    let modes = [Mode::Oracle, Mode::Unaligned, Mode::Single];
    let rows = latency_sweep(&suite, &modes, &LATENCIES_MS, &PipelineConfig::default(), &params)?;

    println!("{:<10} {:>7} {:>7} {:>7}", "mode", "latency", "AP50", "AP70");
    for r in &rows {
        println!("{:<10} {:>5}ms {:>7.3} {:>7.3}", r.mode, r.latency_ms, r.ap50, r.ap70);
    }
    let path = std::env::temp_dir().join("latalign-sweep.csv");
    std::fs::write(&path, sweep_csv(&rows)?)?;
    println!("{} rows in {:.1} s, csv at {}", rows.len(), start.elapsed().as_secs_f64(), path.display());
    Ok(())
}
