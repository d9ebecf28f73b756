//! Ground-truth trajectory field for the moving car seen 400 ms late, written
//! as a binary dump and rendered to PNG.

use latalign::harness::fixtures::motion_fixture;
use latalign::harness::render::{render_field, save_png};
use latalign::pillars::feature_grid;
use latalign::simkit::generate_scenario;
use latalign::trajfield::{
    build_trajectories, rasterize_field, read_field_dump, trajectory_length, window_times, write_field_dump,
    HeatmapMode,
};
use latalign::GridSpec;

fn main() -> latalign::Result<()> {
    let cfg = motion_fixture();
    let scenario = generate_scenario(&cfg)?;
    let coop = cfg.agent("coop").expect("fixture agent");
    let r = cfg.range;
    let grid = feature_grid(&GridSpec::centered(r.half_x, r.half_y, r.base_cell));

    let t = 1_000_000;
    let tau = 400_000;
    let m = coop.cache_capacity;
    println!("samples for tau=0.4 s, 10 Hz, m={m}: {}", trajectory_length(tau, coop.frequency_hz, m));
    let times = window_times(t, tau, coop.frequency_hz, m);
    let annotations = scenario.agent_annotations(&coop.agent_id, &times, t);
    let trajectories = build_trajectories(&annotations, t, coop.period_us())?;
    for tr in &trajectories {
        let first = &tr.samples[0];
        let last = tr.samples.last().expect("non-empty");
        println!(
            "object {}: {} samples from ({:.1}, {:.1}) age {} to ({:.1}, {:.1}) age {}",
            tr.object_id,
            tr.len(),
            first.cx,
            first.cy,
            first.age,
            last.cx,
            last.cy,
            last.age
        );
    }

    let field = rasterize_field(&trajectories, &grid, HeatmapMode::Gaussian);
    let covered = field.position.iter().filter(|&&p| p > 0.0).count();
    println!("{covered} covered cells, peak response {:.2}", field.position.iter().cloned().fold(0.0, f64::max));

    let dir = std::env::temp_dir().join("latalign-trajectory-field");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("field.trfd");
    write_field_dump(&field, std::fs::File::create(&path)?)?;
    let dump = read_field_dump(std::fs::File::open(&path)?)?;
    save_png(&render_field(&dump, 8), &dir.join("field.png"))?;
    println!("wrote {} and field.png", path.display());
    Ok(())
}
