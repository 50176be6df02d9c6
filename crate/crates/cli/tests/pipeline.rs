use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ci.json")
}

fn ctnav(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctnav"))
        .arg("--config")
        .arg(config())
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env("CTNAV_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = ctnav(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_all(dir: &Path) {
    for step in [
        &["gen-worlds"][..],
        &["build-prm"],
        &["collect"],
        &["train", "--bc", "--seed", "0"],
        &["train", "--seed", "0"],
        &["train-value"],
        &["finetune", "--seed", "0"],
        &["eval"],
        &["render", "--index", "0"],
    ] {
        ok(dir, step);
    }
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path());
    run_all(b.path());

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("eval/summary.json")).unwrap()).unwrap();
    let names: Vec<&str> = summary["summary"]["methods"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["BC-CT", "CT", "F-CT"]);

    for f in [
        "worlds.json",
        "arenas.json",
        "dataset.jsonl",
        "models/ct_s0.ckpt",
        "models/bc_ct_s0.ckpt",
        "models/f_ct_s0.ckpt",
        "models/value.ckpt",
        "eval/reports.jsonl",
        "eval/summary.json",
    ] {
        let (x, y) = (fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
    let svg = fs::read_to_string(a.path().join("eval/render_0.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn config_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let out = ctnav(d.path(), &["--train.no_such_field", "3", "gen-worlds"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_field"));

    let out = ctnav(d.path(), &["--train.batch_size", "0", "gen-worlds"]);
    assert_eq!(out.status.code(), Some(1));

    let out = ctnav(d.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_inputs_name_the_producer() {
    let d = tempfile::tempdir().unwrap();
    let out = ctnav(d.path(), &["collect"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gen-worlds") || err.contains("build-prm"), "{err}");

    ok(d.path(), &["gen-worlds"]);
    ok(d.path(), &["build-prm"]);
    let out = ctnav(d.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`collect`"));
}
