mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::small_desk;
use hidden_fold::cli::{RunManifest, EXIT_CONFIG, EXIT_OK};

fn hfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A two-epoch desk configuration on a few hundred records.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = small_desk(200, 2);
    c.data.val = 100;
    c.data.test = 100;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, c.to_toml()).unwrap();
    path
}

fn train_tiny(dir: &Path, extra: &[&str]) -> PathBuf {
    let cfg = tiny_config(dir);
    let out = dir.join("run");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = hfn(&args);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn vanilla_with_fold_exits_2() {
    let o = hfn(&["train", "--method", "vanilla", "--fold", "3,4", "--out", "/nonexistent/never"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn empty_sweep_axis_exits_2() {
    let o = hfn(&["sweep", "--axis", "topk", "--values", "", "--dry-run"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn unreadable_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.hfnm");
    std::fs::write(&junk, b"not a model").unwrap();
    for args in [vec!["report", junk.to_str().unwrap()], vec!["inspect", "/no/such/file.hfnm"]] {
        assert_eq!(hfn(&args).status.code(), Some(EXIT_CONFIG));
    }
}

#[test]
fn train_records_k_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--method", "hfn", "--topk", "30", "--fold", "3,4"]);
    let m = RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.arch.as_ref().unwrap().k_permille, 300);
    assert_eq!(m.arch.as_ref().unwrap().folded_stages, vec![3, 4]);
    assert_eq!(m.seed, Some(1));
    let log = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "lr", "loss", "val_top1"] {
            assert!(v.get(key).is_some(), "{} missing from {}", key, line);
        }
    }
    assert!(out.join("model.hfnm").exists());
}

#[test]
fn checkpoint_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &[]);
    let ckpt = out.join("model.hfnm");
    let packed = dir.path().join("packed.hfnm");
    let before = std::fs::read(&ckpt).unwrap();

    let o = hfn(&["compress", ckpt.to_str().unwrap(), "--out", packed.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_OK));
    assert_eq!(std::fs::read(&ckpt).unwrap(), before, "compress mutated its input");
    assert!(std::fs::metadata(&packed).unwrap().len() < before.len() as u64);

    // Eval of the full checkpoint and the stripped file agree exactly.
    let cfg = out.join("config.toml");
    let eval = |f: &Path| stdout(&hfn(&["eval", f.to_str().unwrap(), "--config", cfg.to_str().unwrap()]));
    let a = eval(&ckpt);
    assert!(a.starts_with("top1 "), "{}", a);
    assert_eq!(a, eval(&packed));

    let header = stdout(&hfn(&["inspect", "--dump-header", packed.to_str().unwrap()]));
    assert!(header.contains("magic              HFNM"));
    assert!(header.contains("seed               1"));
    assert!(!header.contains("reported params"));
    let full = stdout(&hfn(&["inspect", ckpt.to_str().unwrap()]));
    assert!(full.contains("weights checksum"));
    assert!(full.contains("checkpoint epoch"));

    let manifest = dir.path().join("report.json");
    let o = hfn(&["report", packed.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let m = RunManifest::load(&manifest).unwrap();
    assert_eq!(m.metrics[0]["rows"][0]["reduction_vs_baseline"], 1.0);
}

#[test]
fn paper_tables_print_the_hfn_rows() {
    let c = stdout(&hfn(&["report", "--paper-tables", "cifar100"]));
    let row = c.lines().find(|l| l.starts_with("HFN-ResNet50 (3,4)")).unwrap();
    assert!(row.contains("1.95") && row.contains("48.44x"), "{}", row);
    let i = stdout(&hfn(&["report", "--paper-tables", "imagenet"]));
    let row = i.lines().find(|l| l.starts_with("HFN-ResNet200 (3,4)")).unwrap();
    assert!(row.contains("3.25") && row.contains("26.81x"), "{}", row);
}

#[test]
fn topk_sweep_counts_rise_with_density() {
    let o = hfn(&["sweep", "--axis", "topk", "--values", "10,20,30,40,50,60,70,80,90", "--dry-run"]);
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let reported: Vec<u64> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(reported.len(), 9);
    assert!(reported.windows(2).all(|w| w[0] < w[1]), "{:?}", reported);
}

#[test]
fn fold_sweep_dense_counts_fall() {
    let o = hfn(&[
        "sweep", "--preset", "paper-cifar100", "--axis", "fold", "--values", "4;3,4;2,3,4", "--dry-run",
    ]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    let dense: Vec<u64> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(dense.len(), 3);
    assert!(dense.windows(2).all(|w| w[0] > w[1]), "{:?}", dense);
}
