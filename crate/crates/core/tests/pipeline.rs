use latalign::harness::fixtures::{motion_fixture, static_fixture};
use latalign::harness::{run_pipeline, EncodedScenario, Mode, ModelParams, PipelineConfig};
use latalign::offsets::read_offsets_jsonl;
use latalign::simkit::generate_scenario;
use latalign::trajfield::read_field_dump;

fn encoded(cfg: &latalign::simkit::ScenarioConfig, params: &ModelParams) -> EncodedScenario {
    EncodedScenario::new(generate_scenario(cfg).unwrap(), params).unwrap()
}

#[test]
fn static_scene_is_perfect_without_latency() {
    let params = ModelParams::seeded(0, 2);
    let enc = encoded(&static_fixture(), &params);
    let cfg = PipelineConfig::default().with_latency_ms(0.0);
    let run = run_pipeline(&enc, &cfg, &params, None).unwrap();
    assert_eq!(run.result.ap50, 1.0);
    assert!(run.result.n_gt > 0);
}

#[test]
fn runs_are_deterministic() {
    let params = ModelParams::seeded(0, 2);
    let enc = encoded(&motion_fixture(), &params);
    let cfg = PipelineConfig::default().with_latency_ms(300.0);
    let a = run_pipeline(&enc, &cfg, &params, None).unwrap().result;
    let b = run_pipeline(&enc, &cfg, &params, None).unwrap().result;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn single_agent_ignores_latency() {
    let params = ModelParams::seeded(0, 2);
    let enc = encoded(&static_fixture(), &params);
    let ap = |ms: f64| {
        let cfg = PipelineConfig::default().with_mode(Mode::Single).with_latency_ms(ms);
        run_pipeline(&enc, &cfg, &params, None).unwrap().result.ap50
    };
    assert_eq!(ap(0.0), ap(400.0));
}

#[test]
fn alignment_recovers_moving_car() {
    let params = ModelParams::seeded(0, 2);
    let enc = encoded(&motion_fixture(), &params);
    let ap = |mode: Mode| {
        let cfg = PipelineConfig::default().with_mode(mode).with_latency_ms(400.0);
        run_pipeline(&enc, &cfg, &params, None).unwrap().result.ap50
    };
    assert!(ap(Mode::Oracle) > ap(Mode::Unaligned));
}

#[test]
fn dumps_read_back() {
    let params = ModelParams::seeded(0, 2);
    let enc = encoded(&motion_fixture(), &params);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default().with_latency_ms(200.0);
    run_pipeline(&enc, &cfg, &params, Some(dir.path())).unwrap();

    let mut fields = 0;
    for entry in std::fs::read_dir(dir.path().join("fields")).unwrap() {
        let dump = read_field_dump(std::fs::File::open(entry.unwrap().path()).unwrap()).unwrap();
        assert_eq!(dump.position.dim(), (enc.feature_grid.height_cells, enc.feature_grid.width_cells));
        fields += 1;
    }
    assert!(fields > 0);
    for entry in std::fs::read_dir(dir.path().join("offsets")).unwrap() {
        let file = std::fs::File::open(entry.unwrap().path()).unwrap();
        for set in read_offsets_jsonl(std::io::BufReader::new(file)).unwrap() {
            assert_eq!(set.len(), 18);
        }
    }
    assert!(dir.path().join("detections.jsonl").exists());
    assert!(dir.path().join("ground_truth.jsonl").exists());
}
