//! Fuse two agents' maps, decode boxes with the analytic head and score them
//! against ground truth with rotated-IoU AP.

use latalign::fusion::{decode_detections, fuse_agents, DecodeConfig, DetectionHead, FusionParams};
use latalign::geometry::{rotated_iou, GridSpec, OrientedBox};
use latalign::harness::average_precision;
use latalign::simkit::BoxAnnotation;
use latalign::FeatureMap;

fn blob(f: &mut FeatureMap, x: f64, y: f64, level: f64) {
    let [r, c] = f.grid.continuous_cell(x, y);
    let (c_n, h, w) = f.data.dim();
    for rr in 0..h {
        for cc in 0..w {
            let d2 = (rr as f64 - r).powi(2) + (cc as f64 - c).powi(2);
            for k in 0..c_n {
                f.data[[k, rr, cc]] += level * (-d2 / 1.5).exp();
            }
        }
    }
}

fn main() -> latalign::Result<()> {
    let c = 16;
    let grid = GridSpec::centered(16.0, 16.0, 1.6);
    let mut ego = FeatureMap::zeros(c, grid, "ego", 0);
    let mut coop = FeatureMap::zeros(c, grid, "coop", 0);
    blob(&mut ego, -4.0, 3.0, 0.3);
    blob(&mut coop, -4.0, 3.0, 0.2);
    blob(&mut coop, 7.0, -5.0, 0.4);

    let fused = fuse_agents(&[ego, coop], &FusionParams::sum(c, 2))?;
    let head = DetectionHead::analytic(c, 20.0, -4.0, 4.5, 2.0);
    let cfg = DecodeConfig {
        refine: true,
        ..DecodeConfig::default()
    };
    let dets = decode_detections(&fused, &head, &cfg)?;

    let gts: Vec<BoxAnnotation> = [(1, -4.0, 3.0), (2, 7.0, -5.0), (3, 0.0, 12.0)]
        .into_iter()
        .map(|(id, x, y)| BoxAnnotation {
            object_id: id,
            timestamp_us: 0,
            bbox: OrientedBox::new(x, y, 0.0, 4.5, 2.0),
        })
        .collect();
    for d in &dets {
        let best = gts.iter().map(|g| rotated_iou(&g.bbox, &d.bbox)).fold(0.0, f64::max);
        println!("box at ({:.2}, {:.2}) score {:.3} best IoU {best:.2}", d.bbox.cx, d.bbox.cy, d.score);
    }
    let ap = average_precision(&dets, &gts, 0.5);
    println!("AP50 {:.3} with {} of {} objects found", ap.ap, dets.len(), ap.n_gt);
    Ok(())
}
