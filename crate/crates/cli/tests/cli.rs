//! End-to-end tests of the `bevforecast` binary: each test shells out to the
//! compiled CLI and checks its observable contract (exit codes, files, CSVs).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bevforecast"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn bevforecast");
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A config small enough that train + eval finish in seconds.
fn write_tiny_cfg(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "# desk-test override\n\
         d_model = 16\n\
         n_heads = 2\n\
         n_bev_queries = 4\n\
         key_points = 4\n\
         knn = 4\n\
         grid_h = 16\n\
         grid_w = 16\n\
         pre_encoder_layers = 1\n\
         bda_layers = 1\n\
         local_attn_layers = 1\n\
         sgcp_blocks = 1\n\
         itr_blocks = 1\n\
         batch_size = 2\n\
         epochs = 1\n\
         pretrain_epochs = 1\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(root)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_str().unwrap().to_string(), fs::read(&p).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn gen_data_empty_dataset_is_valid() {
    let tmp = tempdir().unwrap();
    let out = tmp.path().join("ds");
    run_ok(&["gen-data", "--out", out.to_str().unwrap(), "--n", "0"]);
    // an empty dataset must still round-trip through the reader
    assert!(out.join("index.txt").exists());
    assert!(out.join("manifest.txt").exists());
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["gen-data", "--out", a.to_str().unwrap(), "--n", "3", "--seed", "7"]);
    run_ok(&["gen-data", "--out", b.to_str().unwrap(), "--n", "3", "--seed", "7"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b), "same seed must produce identical files");

    let ha = fs::read_to_string(a.join("manifest.txt")).unwrap();
    let hb = fs::read_to_string(b.join("manifest.txt")).unwrap();
    assert_eq!(ha, hb);
    assert!(ha.lines().any(|l| l.starts_with("config_hash ")));
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let tmp = tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "d_modle = 16\n").unwrap();
    let out = bin()
        .args(["gen-data", "--config", cfg.to_str().unwrap(), "--out", "unused", "--n", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("d_modle"), "stderr should name the bad key, got: {err}");
}

#[test]
fn train_then_eval_contract() {
    let tmp = tempdir().unwrap();
    let cfg = write_tiny_cfg(tmp.path());
    let ds = tmp.path().join("ds");
    run_ok(&["gen-data", "--config", &cfg, "--out", ds.to_str().unwrap(), "--n", "4"]);

    // one epoch of training: the step log must have one row per step
    let run = tmp.path().join("run");
    run_ok(&[
        "train", "--config", &cfg,
        "--dataset", ds.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]);
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,epoch,lr,total,goal,disp,dense,multi,nll,kl,ent,aux"
    );
    // 4 scenes / batch 2 = 2 steps per epoch, 1 epoch
    assert_eq!(lines.count(), 2, "expected one log row per optimizer step");
    let ck = run.join("ck_final.bvck");
    assert!(ck.exists());

    // eval writes the metrics CSV with the exact contract columns
    let ev = tmp.path().join("ev");
    run_ok(&[
        "eval", "--config", &cfg,
        "--dataset", ds.to_str().unwrap(),
        "--checkpoint", ck.to_str().unwrap(),
        "--out", ev.to_str().unwrap(),
        "--plots", "1",
    ]);
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "minADE5,minADE10,minFDE1,minFDE10,MissRate");
    let row: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row.len(), 5);
    assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(ev.join("metrics_per_layer.csv").exists());
    assert!(ev.join("sample_000.png").exists());

    // eval is deterministic: a second run yields identical CSVs
    let ev2 = tmp.path().join("ev2");
    run_ok(&[
        "eval", "--config", &cfg,
        "--dataset", ds.to_str().unwrap(),
        "--checkpoint", ck.to_str().unwrap(),
        "--out", ev2.to_str().unwrap(),
        "--plots", "0",
    ]);
    let csv2 = fs::read_to_string(ev2.join("metrics.csv")).unwrap();
    assert_eq!(csv, csv2);
}

#[test]
fn gradcheck_passes_and_covers_core_ops() {
    let out = run_ok(&["gradcheck", "--seed", "0"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let passes = text.lines().filter(|l| l.ends_with("PASS")).count();
    assert!(passes >= 4, "expected at least 4 gradient checks, got {passes}:\n{text}");
    assert!(!text.contains("FAIL"), "gradcheck reported failures:\n{text}");
}
