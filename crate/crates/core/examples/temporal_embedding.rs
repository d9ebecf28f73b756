//! Sinusoidal delay embedding and the fixed-capacity feature cache.

use latalign::geometry::GridSpec;
use latalign::temporal::{frames_behind, temporal_embed, AgentCache};
use latalign::FeatureMap;

fn main() -> latalign::Result<()> {
    let c = 8;
    for tau in [0.0, 1.0, 2.0, 4.0] {
        let te = temporal_embed(tau, c)?;
        let v: Vec<String> = te.values.iter().map(|x| format!("{x:+.3}")).collect();
        println!("tau={tau}: [{}]", v.join(", "));
    }

    let grid = GridSpec::centered(4.0, 4.0, 1.6);
    let mut cache = AgentCache::new("coop", 4)?;
    for k in 0..6 {
        let evicted = cache.insert(FeatureMap::zeros(c, grid, "coop", k * 100_000))?;
        if let Some(old) = evicted {
            println!("inserted {} us, evicted {} us", k * 100_000, old.timestamp_us);
        }
    }
    println!("cache holds {:?}", cache.timestamps());
    if let Err(e) = cache.insert(FeatureMap::zeros(c, grid, "coop", 200_000)) {
        println!("late frame rejected: {e}");
    }

    let t = 900_000;
    for ts in cache.timestamps() {
        println!("frame {ts} us is {} frames behind t={t} us", frames_behind(t, ts, 100_000));
    }
    Ok(())
}
