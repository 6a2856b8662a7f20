use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayesbench"))
        .args(args)
        .env("BAYESBENCH_OUT", out_root)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, algorithms: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        format!(
            r#"{{
                "task": {{"generator": "two-moons", "n": 120}},
                "algorithms": [{algorithms}],
                "seeds": [0],
                "train": {{"epochs": 10}}
            }}"#
        ),
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gen_task_writes_split_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("task");
    let o = bin(
        &[
            "gen-task",
            "--spec",
            r#"{"generator":"gap-regression","n":100}"#,
            "--seed",
            "4",
            "--out",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for f in [
        "task.json",
        "train.csv",
        "val.csv",
        "test-id.csv",
        "test-ood-gap.csv",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn run_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), r#"{"algorithm": {"kind": "map"}}"#);
    let o = bin(&["run", "-c", &good], &dir.path().join("good"));
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(dir.path().join("good/summary.csv").is_file());
    assert!(dir.path().join("good/map/seed_0/record.json").is_file());

    let bad_cell = write_config(
        dir.path(),
        r#"{"algorithm": {"kind": "mcd", "dropout_rate": 0.0}}"#,
    );
    let o = bin(&["run", "-c", &bad_cell], &dir.path().join("bad-cell"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("failed: mcd seed 0"));

    std::fs::write(dir.path().join("typo.json"), r#"{"tsk": {}}"#).unwrap();
    let o = bin(
        &["run", "-c", dir.path().join("typo.json").to_str().unwrap()],
        &dir.path().join("typo"),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn compare_and_report_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("out");
    let cfg = write_config(dir.path(), r#"{"algorithm": {"kind": "map"}}"#);
    assert_eq!(bin(&["run", "-c", &cfg], &root).status.code(), Some(0));

    let pred = root.join("map/seed_0/pred_test-id.csv");
    let o = bin(
        &[
            "compare",
            "--model",
            pred.to_str().unwrap(),
            "--reference",
            pred.to_str().unwrap(),
        ],
        &root,
    );
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let block = v.as_object().unwrap().values().next().unwrap();
    assert_eq!(block["tv"], 0.0);
    assert_eq!(block["agreement"], 1.0);

    std::fs::remove_file(root.join("summary.csv")).unwrap();
    let o = bin(&["report", "--dir", root.to_str().unwrap()], &root);
    assert_eq!(o.status.code(), Some(0));
    assert!(root.join("summary.csv").is_file());
}
