use std::process::Command;

fn splitfed() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splitfed"))
}

#[test]
fn run_writes_a_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let status = splitfed()
        .args(["run", "--rounds", "2", "--attack", "misa", "--set", "samples=600", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# sfl-metrics v1 fingerprint="));
    assert_eq!(lines[1], "round,accuracy,loss,arm,gamma,rule");
    assert_eq!(lines.len(), 4);
    assert!(String::from_utf8_lossy(&status.stdout).contains("final accuracy"));
}

#[test]
fn invalid_config_exits_nonzero_and_names_the_field() {
    let out = splitfed().args(["run", "--split", "V7"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("split"), "{err}");

    let out = splitfed().args(["run", "--set", "nonsense"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "# small\nrounds = 1\nsamples = 400\nclients = 5\n").unwrap();
    let out = dir.path().join("m.csv");
    let status = splitfed()
        .args(["run", "--ratio", "0.2", "--attack", "ipm", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);
}

#[test]
fn selftest_passes() {
    let out = splitfed().arg("selftest").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
}
