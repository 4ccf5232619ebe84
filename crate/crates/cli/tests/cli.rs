use std::path::Path;
use std::process::{Command, Output};

fn hfedckd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfedckd")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    let out = dir.join("out");
    let text = format!(
        "dataset = \"synthetic\"\nclients = 6\nparticipants = 3\nseed = 2\nrounds = 3\n\
         synthetic_train = 240\nsynthetic_test = 90\noutput_dir = {:?}\n{extra}",
        out.display().to_string()
    );
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn run_writes_metrics_timing_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = hfedckd(&["run", &cfg, "--set", "rounds=2", "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let o = dir.path().join("out");
    let metrics = std::fs::read_to_string(o.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("round,participants,weights,"));
    let manifest = std::fs::read_to_string(o.join("metrics.csv.manifest")).unwrap();
    assert!(manifest.contains("rounds = 2"), "{manifest}");
    for f in ["timing.csv", "global.ckpt", "generator.ckpt"] {
        assert!(o.join(f).is_file(), "{f}");
    }

    let feats = dir.path().join("features.csv");
    let out = hfedckd(&[
        "dump-features",
        &cfg,
        "--checkpoint",
        &o.join("global.ckpt").display().to_string(),
        "--count",
        "20",
        "--out",
        &feats.display().to_string(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(feats).unwrap();
    assert_eq!(rows.lines().count(), 20);
    assert!(rows.lines().all(|l| l.starts_with("global,")));
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus_key = 1\n");
    let out = hfedckd(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    let cfg = write_config(dir.path(), "");
    let out = hfedckd(&["run", &cfg, "--set", "participants=9"]);
    assert_eq!(out.status.code(), Some(2));

    let out = hfedckd(&["preset", "S@7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("S@50"));
}

#[test]
fn missing_dataset_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let missing = dir.path().join("nowhere").display().to_string();
    let out = hfedckd(&["run", &cfg, "--set", "dataset=\"fashion-idx\"", "--set", &format!("data_dir={missing:?}")]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
