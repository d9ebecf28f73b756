//! Pillarize one ego frame of the parked-car fixture, encode it and run the
//! backbone down to the 1/4-scale feature map.

use latalign::geometry::GridSpec;
use latalign::harness::fixtures::static_fixture;
use latalign::harness::ModelParams;
use latalign::pillars::{backbone, encode_pillars, pillarize_frame, PillarCenter};
use latalign::simkit::generate_scenario;

fn main() -> latalign::Result<()> {
    let cfg = static_fixture();
    let scenario = generate_scenario(&cfg)?;
    let params = ModelParams::seeded(0, 2);
    let r = cfg.range;
    let grid = GridSpec::centered(r.half_x, r.half_y, r.base_cell);
    let frame = &scenario.frames["ego"][0];

    let pillars = pillarize_frame(frame, &grid, (r.z_min, r.z_max), PillarCenter::Geometric);
    println!(
        "{} points -> {} non-empty pillars on a {}x{} grid ({} dropped)",
        frame.points.len(),
        pillars.cells.len(),
        grid.height_cells,
        grid.width_cells,
        pillars.dropped
    );

    let base = encode_pillars(&pillars, &params.encoder, &frame.agent_id, frame.timestamp_us)?;
    let features = backbone(&base, &params.backbone)?;
    let g = features.grid;
    println!(
        "base map {:?}, feature map {:?} at {} m cells, origin ({:.2}, {:.2})",
        base.data.dim(),
        features.data.dim(),
        g.cell_size,
        g.origin_x,
        g.origin_y
    );

    let (pr, pc) = features.peak_cell();
    let [x, y] = g.cell_center(pr, pc);
    println!("strongest feature cell ({pr}, {pc}) at ({x:.2}, {y:.2})");
    for b in &frame.boxes {
        println!("  box {} at ({:.2}, {:.2})", b.object_id, b.bbox.cx, b.bbox.cy);
    }
    Ok(())
}
