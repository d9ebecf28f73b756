use std::path::Path;
use std::process::{Command, Output};

fn latalign(args: &[&str], out: &Path) -> Output {
    let output = Command::new(env!("CARGO_BIN_EXE_latalign"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn latalign");
    assert!(
        output.status.success(),
        "latalign {args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

#[test]
fn simulate_writes_frames_and_config() {
    let dir = tempfile::tempdir().unwrap();
    latalign(&["simulate", "--scenario", "static", "--latency-ms", "100:300", "--seed", "9"], dir.path());
    let cfg = latalign::simkit::ScenarioConfig::load(&dir.path().join("scenario.json")).unwrap();
    assert_eq!(cfg.seed, 9);
    let frames = latalign::simkit::read_frames(&dir.path().join("frames_coop.jsonl")).unwrap();
    assert!(!frames.is_empty());
}

#[test]
fn align_eval_render_chain() {
    let dir = tempfile::tempdir().unwrap();
    let out = latalign(&["align", "--scenario", "motion", "--latency-ms", "300", "--mode", "oracle"], dir.path());
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(result["mode"], "oracle");

    let out = latalign(&["eval"], dir.path());
    let line = String::from_utf8(out.stdout).unwrap();
    let ap50: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((ap50 - result["ap50"].as_f64().unwrap()).abs() < 1e-4);
    assert!(dir.path().join("pr50.csv").exists());

    latalign(&["render"], dir.path());
    assert!(std::fs::read_dir(dir.path().join("png")).unwrap().next().is_some());
}

#[test]
fn sweep_csv_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["sweep", "--scenario", "motion", "--latency-ms", "0,400", "--mode", "oracle,unaligned"];
    latalign(&args, a.path());
    latalign(&args, b.path());
    let csv_a = std::fs::read(a.path().join("sweep.csv")).unwrap();
    let csv_b = std::fs::read(b.path().join("sweep.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    assert_eq!(String::from_utf8(csv_a).unwrap().lines().count(), 5);
}

#[test]
fn unknown_scenario_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_latalign"))
        .args(["align", "--scenario", "no_such_scene", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).starts_with("error:"));
}
