//! Attention restricted to a query's trajectory positions: gather responses,
//! attend with a seeded layer and with the uniform-mean oracle layer.

use latalign::attention::{attend, attend_token, gather_response, AttentionLayer};
use latalign::geometry::GridSpec;
use latalign::offsets::{Flavor, OffsetSet};
use latalign::FeatureMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let c = 8;
    let mut f = FeatureMap::zeros(c, GridSpec::new(0.0, 0.0, 1.6, 12, 12), "coop", 0);
    // Stale object mass smeared along row 5, columns 2..=4.
    for col in 2..=4 {
        for k in 0..c {
            f.data[[k, 5, col]] = (col - 1) as f64 * (1.0 + 0.3 * (k as f64).sin());
        }
    }
    let offs = OffsetSet {
        query: (5, 8),
        positions: (0..18).map(|j| [5.0, 2.0 + (j % 6) as f64 * 0.4]).collect(),
        flavor: Flavor::GroundTruth,
    };
    let r = gather_response(&f, &offs);
    println!("response set {:?}, first row {:.2?}", r.rows.dim(), r.rows.row(0).to_vec());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = AttentionLayer::seeded(c, 4, &mut rng);
    let q: Vec<f64> = (0..c).map(|k| (0.7 * k as f64).cos()).collect();
    let out = attend(&q, &r, &layer);
    for (h, w) in out.weights.iter().enumerate() {
        let top = w.iter().cloned().fold(0.0, f64::max);
        println!("head {h}: weights sum {:.6}, max {top:.3}", w.iter().sum::<f64>());
    }

    let oracle = AttentionLayer::uniform_mean(c, 1);
    let moved = attend_token(&q, &r, &oracle);
    let mean: Vec<f64> = (0..c).map(|k| r.rows.column(k).mean().unwrap_or(0.0)).collect();
    println!("oracle output at the query  {:.3?}", moved);
    println!("mean of the trajectory rows {:.3?}", mean);
}
