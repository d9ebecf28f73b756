//! Latency sweeps over modes and scenario suites.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::metrics::{evaluate_frames, FrameEval};
use crate::harness::model::ModelParams;
use crate::harness::pipeline::{run_pipeline, EncodedScenario, Mode, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub latency_ms: u32,
    pub ap50: f64,
    pub ap70: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

/// One row per `(mode, latency)`, AP pooled over every frame of every
/// scenario. Conditions run in parallel; row order is modes then latencies.
pub fn latency_sweep(
    suite: &[EncodedScenario],
    modes: &[Mode],
    latencies_ms: &[u32],
    base: &PipelineConfig,
    params: &ModelParams,
) -> Result<Vec<SweepRow>> {
    let conditions: Vec<(Mode, u32)> = modes
        .iter()
        .flat_map(|&m| latencies_ms.iter().map(move |&l| (m, l)))
        .collect();
    conditions
        .par_iter()
        .map(|&(mode, latency_ms)| {
            let cfg = base.with_mode(mode).with_latency_ms(latency_ms as f64);
            let mut frames: Vec<FrameEval> = Vec::new();
            for enc in suite {
                frames.extend(run_pipeline(enc, &cfg, params, None)?.frames);
            }
            let r50 = evaluate_frames(&frames, 0.5);
            let r70 = evaluate_frames(&frames, 0.7);
            Ok(SweepRow {
                mode,
                latency_ms,
                ap50: r50.ap,
                ap70: r70.ap,
                n_gt: r50.n_gt,
                n_det: r50.n_det,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, sweep_csv(rows)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_latency_list_gives_empty_table() {
        let params = ModelParams::seeded(0, 2);
        let rows = latency_sweep(&[], &[Mode::Oracle], &[], &PipelineConfig::default(), &params).unwrap();
        assert!(rows.is_empty());
        assert_eq!(sweep_csv(&rows).unwrap(), "");
    }
}
