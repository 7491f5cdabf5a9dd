//! End-to-end tests of the aura binary: process spawn, flag parsing, file
//! layout, exit codes, and run-to-run determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aura_core::dataset::format::read_checkpoint;

fn aura(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aura"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "command failed: {}", stderr(out));
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Tiny synthetic dataset: 4 classes, 6 windows each.
fn make_dataset(dir: &Path, classes: u32, seed: u32) -> PathBuf {
    let ds = dir.join(format!("ds{classes}x{seed}"));
    let out = aura(&[
        "preprocess",
        "--format",
        "synthetic",
        "--classes",
        &classes.to_string(),
        "--per-class",
        "6",
        "--noise",
        "0.2",
        "--seed",
        &seed.to_string(),
        "--out",
        &path_str(&ds),
    ]);
    assert_ok(&out);
    ds
}

/// One-epoch toy transformer checkpoint on the given dataset.
fn quick_train(ds: &Path, run_dir: &Path, seed: u32) -> PathBuf {
    let out = aura(&[
        "train",
        "--data",
        &path_str(ds),
        "--pair",
        "text-imu",
        "--patch-len",
        "250",
        "--model-dim",
        "8",
        "--heads",
        "2",
        "--layers",
        "1",
        "--mlp-dim",
        "16",
        "--out-dim",
        "8",
        "--epochs",
        "1",
        "--batch-size",
        "6",
        "--seed",
        &seed.to_string(),
        "--run-dir",
        &path_str(run_dir),
    ]);
    assert_ok(&out);
    run_dir.join("model_final.aurc")
}

#[test]
fn preprocess_writes_layout_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = make_dataset(tmp.path(), 4, 7);
    for name in ["manifest.txt", "vocab.txt", "preprocess_config.txt"] {
        assert!(ds.join(name).is_file(), "{name} missing");
    }
    let manifest = std::fs::read_to_string(ds.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("aura-dataset v1\n"));
    assert!(ds.join("blobs").is_dir());

    // 24 windows split 18/3/3, reported as a table.
    let out = aura(&[
        "preprocess",
        "--format",
        "synthetic",
        "--classes",
        "4",
        "--per-class",
        "6",
        "--out",
        &path_str(&tmp.path().join("again")),
    ]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("train\t18"), "summary missing: {text}");
    assert!(text.contains("val\t3"));
    assert!(text.contains("test\t3"));
}

#[test]
fn preprocess_ingests_raw_recordings() {
    let tmp = tempfile::tempdir().unwrap();
    let dat = tmp.path().join("subject101.dat");
    let mut rows = String::new();
    for i in 0..1200 {
        let t = i as f64 / 100.0;
        let mut cols = vec!["NaN".to_string(); 54];
        cols[0] = format!("{t:.2}");
        cols[1] = "4".to_string();
        for (j, c) in (21..24).enumerate() {
            cols[c] = format!("{:.4}", (t + j as f64).sin());
        }
        for c in 24..27 {
            cols[c] = "0.5".to_string();
        }
        for c in 27..30 {
            cols[c] = "0.1".to_string();
        }
        rows.push_str(&cols.join(" "));
        rows.push('\n');
    }
    std::fs::write(&dat, rows).unwrap();

    let ds = tmp.path().join("ds");
    let out = aura(&[
        "preprocess",
        "--format",
        "pamap2",
        "--in",
        &path_str(&dat),
        "--out",
        &path_str(&ds),
    ]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(
        text.contains("train\t2"),
        "12 s at 100 Hz is two windows: {text}"
    );
    let manifest = std::fs::read_to_string(ds.join("manifest.txt")).unwrap();
    assert!(manifest.contains("label=walking"), "{manifest}");
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    // Missing required --out.
    let out = aura(&["preprocess", "--format", "synthetic"]);
    assert_eq!(out.status.code(), Some(2));

    // mocap-imu without a mode.
    let ds = make_dataset(tmp.path(), 4, 7);
    let out = aura(&["train", "--data", &path_str(&ds), "--pair", "mocap-imu"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("--progressive"));

    // A config-file key no field consumes.
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "mystery=1\n").unwrap();
    let out = aura(&[
        "train",
        "--data",
        &path_str(&ds),
        "--pair",
        "text-imu",
        "--config",
        &path_str(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("mystery"), "{}", stderr(&out));
}

#[test]
fn malformed_and_mismatched_data_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let ds4 = make_dataset(tmp.path(), 4, 7);
    let ckpt = quick_train(&ds4, &tmp.path().join("run"), 0);

    // Corrupt manifest.
    let bad = tmp.path().join("bad");
    std::fs::create_dir_all(&bad).unwrap();
    std::fs::write(bad.join("manifest.txt"), "garbage\n").unwrap();
    let out = aura(&[
        "eval",
        "--data",
        &path_str(&bad),
        "--checkpoint",
        &path_str(&ckpt),
        "--task",
        "retrieval",
        "--run-dir",
        &path_str(&tmp.path().join("r1")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));

    // Zero-shot against a dataset whose vocabulary the anchor never saw.
    let ds5 = make_dataset(tmp.path(), 5, 7);
    let out = aura(&[
        "eval",
        "--data",
        &path_str(&ds5),
        "--checkpoint",
        &path_str(&ckpt),
        "--task",
        "har",
        "--regime",
        "zeroshot",
        "--run-dir",
        &path_str(&tmp.path().join("r2")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("vocabulary"), "{}", stderr(&out));
}

#[test]
fn train_is_deterministic_and_stamps_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = make_dataset(tmp.path(), 4, 7);
    let a = quick_train(&ds, &tmp.path().join("a"), 3);
    let b = quick_train(&ds, &tmp.path().join("b"), 3);
    let c = quick_train(&ds, &tmp.path().join("c"), 4);
    let bytes_a = std::fs::read(&a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&b).unwrap(), "same seed, same bytes");
    assert_ne!(
        bytes_a,
        std::fs::read(&c).unwrap(),
        "different seed diverges"
    );

    let ckpt = read_checkpoint::<f64>(&a).unwrap();
    assert_eq!(ckpt.config["pair"], "text-imu");
    assert_eq!(ckpt.config["anchor"], "pseudo_text");
    assert_eq!(ckpt.config["anchor_dim"], "8");
    assert_eq!(ckpt.config["anchor_vocab"], "29");
    assert_eq!(ckpt.config["train_seed"], "3");
    assert_eq!(ckpt.config["role"], "imu");
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = make_dataset(tmp.path(), 4, 7);
    let cfg = tmp.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "pair=text-imu\nepochs=1\nseed=9\npatch_len=250\nmodel_dim=8\nheads=2\nlayers=1\nmlp_dim=16\nout_dim=8\nbatch_size=6\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = aura(&[
        "train",
        "--data",
        &path_str(&ds),
        "--config",
        &path_str(&cfg),
        "--seed",
        "3",
        "--run-dir",
        &path_str(&run),
    ]);
    assert_ok(&out);
    let echo = std::fs::read_to_string(run.join("model_config.txt")).unwrap();
    assert!(echo.contains("seed=3\n"), "flag wins: {echo}");
    assert!(echo.contains("epochs=1\n"), "file fills the gap: {echo}");
    let ckpt = read_checkpoint::<f64>(&run.join("model_final.aurc")).unwrap();
    assert_eq!(ckpt.config["train_seed"], "3");
}

#[test]
fn eval_writes_retrieval_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = make_dataset(tmp.path(), 4, 7);
    let ckpt = quick_train(&ds, &tmp.path().join("run"), 0);
    let run = tmp.path().join("eval");
    let out = aura(&[
        "eval",
        "--data",
        &path_str(&ds),
        "--checkpoint",
        &path_str(&ckpt),
        "--task",
        "retrieval",
        "--ks",
        "1,2",
        "--show-top-k",
        "1",
        "--run-dir",
        &path_str(&run),
    ]);
    assert_ok(&out);
    let kv = std::fs::read_to_string(run.join("eval_retrieval_test.txt")).unwrap();
    assert!(kv.contains("direction=imu->text"));
    assert!(kv.contains("direction=text->imu"));
    assert!(kv.contains("mrr="));
    let tsv = std::fs::read_to_string(run.join("eval_retrieval_test.tsv")).unwrap();
    assert!(tsv.starts_with("metric\timu->text\ttext->imu\n"), "{tsv}");
    // The qualitative listing names one hit per query.
    assert!(stdout(&out).contains("+0ms: "), "{}", stdout(&out));
}

#[test]
fn compare_tabulates_both_encoders() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = make_dataset(tmp.path(), 4, 7);
    let run = tmp.path().join("cmp");
    let out = aura(&[
        "compare",
        "--data",
        &path_str(&ds),
        "--patch-len",
        "250",
        "--model-dim",
        "8",
        "--heads",
        "2",
        "--layers",
        "1",
        "--mlp-dim",
        "16",
        "--conv-channels",
        "4,8",
        "--kernel",
        "5",
        "--stride",
        "4",
        "--groups",
        "2",
        "--hidden",
        "8",
        "--out-dim",
        "8",
        "--epochs",
        "1",
        "--batch-size",
        "6",
        "--probe-epochs",
        "40",
        "--finetune-epochs",
        "1",
        "--finetune-batch",
        "6",
        "--seed",
        "0",
        "--run-dir",
        &path_str(&run),
    ]);
    assert_ok(&out);
    let tsv = std::fs::read_to_string(run.join("compare.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "regime\ttransformer\trnn");
    assert_eq!(lines.len(), 4);
    for (row, regime) in lines[1..].iter().zip(["zeroshot", "transfer", "finetune"]) {
        let cells: Vec<&str> = row.split('\t').collect();
        assert_eq!(cells[0], regime);
        for cell in &cells[1..] {
            let f: f64 = cell.parse().expect("numeric cell");
            assert!((0.0..=1.0).contains(&f));
        }
    }
    for name in [
        "compare.txt",
        "transformer_final.aurc",
        "rnn_final.aurc",
        "transformer_har_finetune_test.txt",
        "rnn_retrieval_test.tsv",
    ] {
        assert!(run.join(name).is_file(), "{name} missing");
    }
}
