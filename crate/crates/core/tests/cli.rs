use std::path::Path;
use std::process::{Command, Output};

use morphface::io::{read_csv, read_obj};

const SMALL: [&str; 14] = [
    "--set",
    "data.n_subjects=8",
    "--set",
    "data.images_per_subject=5",
    "--set",
    "phase1.epochs=3",
    "--set",
    "phase3.schedule=0.5x1,1x1",
    "--set",
    "net.hidden=16",
    "--set",
    "eval.folds=2",
    "--set",
    "phase2.extra_draws=30",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphface"))
        .args(args)
        .args(SMALL)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn full_pipeline_on_a_small_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    for stage in [&["gen-data"][..], &["fit"], &["train"], &["eval"], &["export-bases", "--count", "2"], &["check-grad"]] {
        let out = run(dir.path(), stage);
        assert!(out.status.success(), "{stage:?} failed: {}", stderr(&out));
    }
    let root = dir.path().join("run");
    for file in [
        "data/model.bin",
        "data/dataset.bin",
        "fit/fit.bin",
        "fit/identity.obj",
        "train/network.bin",
        "train/network_phase2.bin",
        "eval/phase3_verification.csv",
        "bases/id_basis_01.obj",
    ] {
        assert!(root.join(file).is_file(), "missing {file}");
    }
    for stage in ["data", "fit", "train", "eval", "bases"] {
        let config = std::fs::read_to_string(root.join(stage).join("config.txt")).unwrap();
        assert!(config.contains("data.n_subjects = 8"), "{stage} config lacks the override");
    }

    let (header, rows) = read_csv(&root.join("fit/fit_trace.csv")).unwrap();
    assert_eq!(header, ["pass", "objective", "data_term"]);
    let objectives: Vec<f64> = rows.iter().map(|r| r[1].unwrap()).collect();
    assert!(objectives.windows(2).all(|w| w[1] <= w[0] + 1e-9));

    let (header, rows) = read_csv(&root.join("train/phase3_trace.csv")).unwrap();
    assert_eq!(header[1], "lambda_r");
    assert_eq!(rows.iter().map(|r| r[1].unwrap()).collect::<Vec<_>>(), [0.5, 1.0]);

    let (_, rows) = read_csv(&root.join("eval/phase3_verification.csv")).unwrap();
    let auc = rows[0][3].unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let identity = read_obj(&root.join("fit/identity.obj")).unwrap();
    assert!(identity.n_vertices() >= 4);
}

#[test]
fn stages_fail_cleanly_without_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["fit"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error: kind=io msg=\""), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-data", "--set", "data.nonsense=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: kind=config"), "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_set_and_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "seed = 3\ndata.images_per_subject = 10\noutput_dir = from_file\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_morphface"))
        .args(["gen-data", "--config", "run.cfg", "--set", "data.n_subjects=6", "--seed", "11"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let config = std::fs::read_to_string(dir.path().join("from_file/data/config.txt")).unwrap();
    assert!(config.contains("seed = 11"));
    assert!(config.contains("data.images_per_subject = 10"));
    assert!(config.contains("data.n_subjects = 6"));
}
