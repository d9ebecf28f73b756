//! Warp a cooperating agent's map into the ego frame and compare rotated boxes.

use latalign::geometry::{relative, rotated_iou, warp_feature_map, GridSpec, OrientedBox, Pose2};
use latalign::{FeatureMap, FrameId};

fn main() {
    let grid = GridSpec::centered(16.0, 16.0, 1.6);
    let mut f = FeatureMap::zeros(1, grid, "coop", 0);
    let (r, c) = grid.cell_of(3.0, 0.0).expect("inside grid");
    f.data[[0, r, c]] = 1.0;

    let ego = Pose2::new(0.0, 0.0, 0.0);
    let coop = Pose2::new(4.8, -1.6, std::f64::consts::FRAC_PI_2);
    let rel = relative(&ego, &coop);
    let target = FrameId::new("ego", 0);
    let warped = warp_feature_map(&f, &rel, target);
    let (wr, wc) = warped.peak_cell();
    let [x, y] = grid.cell_center(wr, wc);
    let src = grid.cell_center(r, c);
    let [ex, ey] = rel.apply(src);
    println!(
        "coop cell at ({:.2}, {:.2}) lands at ({x:.2}, {y:.2}) in the ego frame, expected ({ex:.2}, {ey:.2})",
        src[0], src[1]
    );

    let a = OrientedBox::new(0.0, 0.0, 0.0, 4.0, 2.0);
    for b in [
        OrientedBox::new(0.0, 0.0, 0.0, 4.0, 2.0),
        OrientedBox::new(2.0, 0.0, 0.0, 4.0, 2.0),
        OrientedBox::new(0.0, 0.0, std::f64::consts::FRAC_PI_2, 4.0, 2.0),
        OrientedBox::new(9.0, 0.0, 0.3, 4.0, 2.0),
    ] {
        println!("IoU with box at ({}, {}) yaw {:.2}: {:.4}", b.cx, b.cy, b.yaw, rotated_iou(&a, &b));
    }
}
