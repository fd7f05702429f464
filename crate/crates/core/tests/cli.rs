use std::fs;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_servo-sim");

const SCENARIO: &str = r#"
name = "cli"
duration_s = 10
warmup_s = 2
seed = 5
[players]
count = 2
interval_s = 1
[behavior]
kind = "random_actions"
[server]
view_distance = 32
"#;

fn write_scenario(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("scenario.toml");
    fs::write(&path, SCENARIO).unwrap();
    path
}

#[test]
fn bench_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_scenario(tmp.path());
    let out = tmp.path().join("out");
    let run = Command::new(BIN)
        .args(["bench", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out)
        .args(["--repeat", "2"])
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for rep in ["rep-00", "rep-01"] {
        for f in ["tick_durations.csv", "efficiency.csv", "invocations.csv", "manifest.json"] {
            assert!(out.join(rep).join(f).exists(), "{rep}/{f}");
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("rep-01/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["repetition"], 1);

    let report = Command::new(BIN).args(["report", "--in"]).arg(&out).output().unwrap();
    assert!(report.status.success());
    let text = String::from_utf8(report.stdout).unwrap();
    assert_eq!(text.matches("max supported players").count(), 2, "{text}");
}

#[test]
fn environment_overrides_scenario_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_scenario(tmp.path());
    let out = tmp.path().join("out");
    let run = Command::new(BIN)
        .env("SERVO_DURATION_S", "4")
        .env("SERVO_SERVER__TICK_RATE_HZ", "10")
        .args(["bench", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let ticks = fs::read_to_string(out.join("rep-00/tick_durations.csv")).unwrap();
    assert_eq!(ticks.lines().count() - 1, 40);
}

#[test]
fn invalid_scenarios_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "duration_s = 0\n").unwrap();
    let run = Command::new(BIN)
        .args(["bench", "--scenario"])
        .arg(&path)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert!(!run.status.success());
    let missing = Command::new(BIN).args(["report", "--in"]).arg(tmp.path()).output().unwrap();
    assert!(!missing.status.success());
}

#[test]
fn bundled_configs_are_valid() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() == "server.toml" {
            let c: servo_core::server::ServerConfig = servo_core::settings::load(Some(&path)).unwrap();
            c.validate().unwrap();
        } else {
            servo_core::workload::Scenario::load(&path).unwrap().validate().unwrap();
        }
        seen += 1;
    }
    assert!(seen >= 5);
}
