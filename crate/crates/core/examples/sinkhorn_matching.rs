//! Entropic matching between predicted and ground-truth attention positions.
//! The offset loss does not depend on the order of the predictions.

use latalign::offsets::{l1_cost, offset_loss, sinkhorn, Flavor, OffsetSet, SinkhornConfig};
use ndarray::array;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> latalign::Result<()> {
    let cfg = SinkhornConfig::default();

    let plan = sinkhorn(&array![[0.0, 1.0], [1.0, 0.0]], &cfg)?;
    println!("2x2 plan {:.4} after {} iterations", plan.plan, plan.iterations);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt: Vec<[f64; 2]> = (0..18).map(|k| [20.0, 10.0 + 0.5 * k as f64]).collect();
    let mut pred: Vec<[f64; 2]> = gt
        .iter()
        .map(|p| [p[0] + rng.random_range(-0.3..0.3), p[1] + rng.random_range(-0.3..0.3)])
        .collect();
    pred.shuffle(&mut rng);

    let set = |positions: Vec<[f64; 2]>, flavor| OffsetSet {
        query: (20, 19),
        positions,
        flavor,
    };
    let gt_set = set(gt.clone(), Flavor::GroundTruth);
    let a = offset_loss(&set(pred.clone(), Flavor::Predicted), &gt_set, &cfg)?;
    pred.reverse();
    let b = offset_loss(&set(pred.clone(), Flavor::Predicted), &gt_set, &cfg)?;
    println!("offset loss {:.6}, after reordering {:.6}", a.loss, b.loss);
    println!("plan residual {:.2e} after {} iterations", a.plan.residual, a.plan.iterations);

    let cost = l1_cost(&pred, &gt);
    let naive: f64 = (0..18).map(|k| cost[[k, k]]).sum::<f64>() / 18.0;
    println!("index-paired L1 would be {naive:.3}");
    Ok(())
}
