//! Behaviour of the `mvfuse` binary: exit codes, stdout discipline, outputs.

use std::collections::BTreeSet;
use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--set",
    "data.n_train=80",
    "--set",
    "data.n_valid=20",
    "--set",
    "data.n_test=20",
    "--set",
    "data.codebook_k=8",
];

fn mvfuse<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_mvfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let mut args = vec!["gen-data".as_ref(), "--out".as_ref(), data.as_os_str()];
    args.extend(SMALL.iter().map(OsStr::new));
    let o = mvfuse(args);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut cmd = vec![
        "train".as_ref(),
        "--data".as_ref(),
        data.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
    ];
    cmd.extend(extra.iter().map(OsStr::new));
    mvfuse(cmd)
}

fn trained_run(epochs: usize) -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let run = dir.path().join("run");
    let e = format!("train.max_epochs={epochs}");
    let o = train(&data, &run, &["--set", &e, "--set", "model.hidden_dim=8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    (dir, data, run)
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    assert!(data.join("meta.json").is_file());
    let first: Vec<Vec<u8>> = ["meta.json", "train.bin", "valid.bin", "test.bin"]
        .iter()
        .map(|f| fs::read(data.join(f)).unwrap())
        .collect();
    gen_data(dir.path());
    for (i, f) in ["meta.json", "train.bin", "valid.bin", "test.bin"]
        .iter()
        .enumerate()
    {
        assert_eq!(fs::read(data.join(f)).unwrap(), first[i], "{f}");
    }
}

#[test]
fn codebook_larger_than_training_points_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = mvfuse([
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "data.n_train=1",
        "--set",
        "data.seq_len=3",
        "--set",
        "data.codebook_k=5",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("k-means: k exceeds points"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\ntrain.max_epochs = 2\ntrain.bogus = 1\n").unwrap();
    let out = dir.path().join("data");
    let o = mvfuse([
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("bogus"));
    let o = mvfuse([
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "gsgn.nope=3",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_corpus_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&dir.path().join("absent"), &dir.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn eval_prints_json_only_and_rejects_corrupt_checkpoints() {
    let (dir, data, run) = trained_run(2);
    let ckpt = run.join("avg10.ckpt");
    let o = mvfuse([
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let v: serde_json::Value =
        serde_json::from_str(stdout.trim()).expect("stdout is one JSON value");
    assert!(v["accuracy"].as_f64().is_some() && v["loss"].as_f64().is_some());
    assert_eq!(stdout.lines().count(), 1);

    let bad = dir.path().join("bad.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&bad, bytes).unwrap();
    let o = mvfuse([
        "eval",
        "--ckpt",
        bad.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("bad.ckpt"), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
}

#[test]
fn report_has_one_row_per_probed_epoch() {
    let (dir, _data, run) = trained_run(3);
    let o = mvfuse(["report", "--run", run.to_str().unwrap(), "--svg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grads = fs::read_to_string(run.join("grads.csv")).unwrap();
    let probed: BTreeSet<&str> = grads
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().count() - 1, probed.len());
    assert!(fs::read_dir(&run).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .ends_with(".svg")));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = mvfuse(["report", "--run", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

/// Epoch of the first maximum of `valid_accuracy`, read straight from the CSV.
fn first_best_epoch(metrics: &Path) -> usize {
    let text = fs::read_to_string(metrics).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (ce, ca) = (col("epoch"), col("valid_accuracy"));
    let mut best = (0, f64::NEG_INFINITY);
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let acc: f64 = f[ca].parse().unwrap();
        if acc > best.1 {
            best = (f[ce].parse().unwrap(), acc);
        }
    }
    best.0
}

#[test]
fn baseline_speedup_is_recomputable() {
    let (dir, data, base) = trained_run(3);
    let run = dir.path().join("gsgn");
    let o = train(
        &data,
        &run,
        &[
            "--set",
            "train.max_epochs=3",
            "--set",
            "model.hidden_dim=8",
            "--baseline",
            base.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let ratio = summary["baseline"]["speedup_ratio"].as_f64().unwrap();
    let expect = first_best_epoch(&base.join("metrics.csv")) as f64
        / first_best_epoch(&run.join("metrics.csv")) as f64;
    assert_eq!(ratio, expect);
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let o = train(
        &data,
        &dir.path().join("run"),
        &[
            "--set",
            "train.peak_lr=1e300",
            "--set",
            "train.warmup_steps=1",
        ],
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}
