use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn trajgan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajgan"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

const TINY: &str = r#"
output_dir = "out"
[dataset]
kind = "toy"
[dataset.toy]
trajectories_per_cluster = 15
[train]
batch_size = 8
steps = 4
snapshot_every = 2
[train.generator]
base_channels = 4
[train.discriminator]
base_channels = 4
[metrics]
n_projections = 10
swd_sample = 500
"#;

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), TINY).unwrap();
    dir
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&trajgan(&["--help"], dir.path())), 0);
    assert_eq!(code(&trajgan(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&trajgan(&["train"], dir.path())), 1);
    let missing = trajgan(&["experiment", "--config", "nope.toml"], dir.path());
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.toml"));
    fs::write(
        dir.path().join("bad.toml"),
        "output_dir = \"o\"\nfolds = 1\n[dataset]\nkind = \"toy\"\n",
    )
    .unwrap();
    assert_eq!(code(&trajgan(&["experiment", "--config", "bad.toml"], dir.path())), 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "tid,lat\n1,40.7\n").unwrap();
    let o = trajgan(&["evaluate", "--real", "bad.csv", "--generated", "bad.csv"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.csv"));
    let o = trajgan(
        &["evaluate", "--real", "missing.csv", "--generated", "bad.csv"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn grad_check_passes_and_fails_on_zero_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let ok = trajgan(&["grad-check"], dir.path());
    assert_eq!(code(&ok), 0);
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.lines().count() >= 12 && !text.contains("FAIL"));
    assert_eq!(code(&trajgan(&["grad-check", "--tolerance", "0"], dir.path())), 3);
}

#[test]
fn dp_account_and_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let o = trajgan(
        &[
            "dp-account",
            "--q",
            "1",
            "--steps",
            "1",
            "--delta",
            "1e-5",
            "--sigma",
            "10",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let eps = stdout_json(&o)["epsilon"].as_f64().unwrap();
    assert!(eps > 0.0 && eps < 2.0, "{eps}");

    let o = trajgan(
        &[
            "dp-account",
            "--q",
            "0.01",
            "--steps",
            "1000",
            "--delta",
            "1e-5",
            "--epsilon",
            "3",
        ],
        dir.path(),
    );
    let v = stdout_json(&o);
    assert!(v["epsilon"].as_f64().unwrap() <= 3.0);
    assert!(v["sigma"].as_f64().unwrap() > 0.3);
}

#[test]
fn experiment_pipeline_end_to_end() {
    let dir = tiny_dir();
    let p = dir.path();
    let o = trajgan(&["experiment", "--config", "cfg.toml"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports = fs::read_to_string(p.join("out/reports.csv")).unwrap();
    let lines: Vec<&str> = reports.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "hd,swd,ttd_wd,trr,fold,steps,seed");
    assert!(lines[6].contains("mean±std"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["train"].as_array().unwrap().len(), 5);
    assert_eq!(manifest["dataset_hash"].as_str().unwrap().len(), 64);

    let ckpt = "out/fold-0/generator.ckpt";
    for file in ["a.csv", "b.csv"] {
        let o = trajgan(
            &[
                "export-pointcloud",
                "--checkpoint",
                ckpt,
                "-n",
                "1",
                "--seed",
                "3",
                "--out",
                file,
            ],
            p,
        );
        assert_eq!(code(&o), 0);
    }
    let a = fs::read_to_string(p.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(p.join("b.csv")).unwrap());
    assert_eq!(a.lines().count(), 145);
    for row in a.lines().skip(1) {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((0.0..=1.0).contains(&v[0]) && (0.0..=1.0).contains(&v[1]), "{row}");
    }

    let o = trajgan(&["preprocess", "--config", "cfg.toml", "--out", "pre"], p);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("trajectories: 30"));
    assert!(p.join("pre/summary.txt").exists());
    let o = trajgan(&["generate", "--checkpoint", ckpt, "-n", "40", "--out", "gen.csv"], p);
    assert_eq!(code(&o), 0);
    let o = trajgan(
        &[
            "evaluate",
            "--real",
            "pre/dataset.csv",
            "--generated",
            "gen.csv",
            "--bbox",
            "unit",
            "--out",
            "eval.csv",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert!(v["hd"].as_f64().unwrap() >= 0.0 && v["swd"].as_f64().unwrap() >= 0.0);
    assert_eq!(fs::read_to_string(p.join("eval.csv")).unwrap().lines().count(), 2);
}

#[test]
fn checkpoint_version_mismatch_is_reported() {
    let dir = tiny_dir();
    let p = dir.path();
    let o = trajgan(&["train", "--config", "cfg.toml", "--steps", "1"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut bytes = fs::read(p.join("out/generator.ckpt")).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    fs::write(p.join("future.ckpt"), bytes).unwrap();
    let o = trajgan(
        &[
            "export-pointcloud",
            "--checkpoint",
            "future.ckpt",
            "-n",
            "1",
            "--out",
            "x.csv",
        ],
        p,
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version 99"));
}

#[test]
fn train_with_dp_flag_reports_privacy() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    // the DP batch is ten times the configured one
    fs::write(
        p.join("cfg.toml"),
        TINY.replace("trajectories_per_cluster = 15", "trajectories_per_cluster = 50"),
    )
    .unwrap();
    let o = trajgan(
        &[
            "train", "--config", "cfg.toml", "--dp", "--seed", "5", "--out", "dp", "--steps", "2",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert!(v["dp"]["epsilon"].as_f64().unwrap() <= 10.0);
    assert_eq!(v["dp"]["q"].as_f64().unwrap(), 0.8);
    let log = fs::read_to_string(p.join("dp/train.jsonl")).unwrap();
    assert!(log.lines().last().unwrap().contains("\"final\""));
}
