use std::path::Path;
use std::process::{Command, Output};

use biqt::data::{load_volume, provenance_path, save_volume, Volume};
use biqt::model::checkpoint;

fn biqt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biqt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn biqt")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn gen_small(dir: &Path) {
    let o = biqt(
        dir,
        &["gen", "--out-dir", "data", "--count", "2", "--dims", "24", "24", "24", "--r", "2", "--seed", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_writes_volumes_manifest_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let data = dir.path().join("data");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), 4);
    let hr = load_volume(data.join("phantom_001.vxl")).unwrap();
    let lr = load_volume(data.join("phantom_001_lr.vxl")).unwrap();
    assert_eq!(hr.dims(), [24; 3]);
    assert_eq!(lr.dims(), [12; 3]);
    assert_eq!(hr.channels(), 6);
    let side: serde_json::Value =
        serde_json::from_slice(&std::fs::read(provenance_path(&data.join("phantom_001_lr.vxl"))).unwrap()).unwrap();
    assert_eq!(side["role"], "lr");
    assert_eq!(side["r"], 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&biqt(p, &["--config", "missing.json", "gradcheck"])), 2);
    std::fs::write(p.join("bad.json"), r#"{"gen": {"colour": 1}}"#).unwrap();
    assert_eq!(code(&biqt(p, &["--config", "bad.json", "gen"])), 2);
    assert_eq!(code(&biqt(p, &["gen"])), 2, "no output directory");
    assert_eq!(code(&biqt(p, &["gen", "--out-dir", "x", "--dims", "30", "30", "30", "--r", "4"])), 2);
    assert_eq!(code(&biqt(p, &["train", "--volume", "nope.vxl", "--out", "m.ckpt"])), 2);
    assert_eq!(code(&biqt(p, &["frobnicate"])), 2);
}

#[test]
fn train_rejects_lr_volumes_and_wrong_factor() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_small(p);
    let lr = biqt(p, &["train", "--volume", "data/phantom_000_lr.vxl", "--out", "m.ckpt", "--epochs", "1"]);
    assert_eq!(code(&lr), 2);
    assert!(String::from_utf8_lossy(&lr.stderr).contains("LR volume"));
    let r3 = biqt(p, &["train", "--volume", "data/phantom_000.vxl", "--out", "m.ckpt", "--r", "3", "--epochs", "1"]);
    assert_eq!(code(&r3), 2);
}

#[test]
fn eval_without_mask_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let v = Volume::new(1, [8, 8, 8], vec![1.0; 512], None).unwrap();
    save_volume(p.join("a.vxl"), &v, None).unwrap();
    save_volume(p.join("b.vxl"), &v, None).unwrap();
    assert_eq!(code(&biqt(p, &["eval", "--prediction", "a.vxl", "--truth", "b.vxl"])), 3);
    std::fs::write(p.join("junk.vxl"), b"VXL1 not really").unwrap();
    assert_eq!(code(&biqt(p, &["eval", "--prediction", "junk.vxl", "--truth", "b.vxl"])), 3);
}

#[test]
fn train_sr_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_small(p);
    let train = biqt(
        p,
        &[
            "train", "--volume", "data/phantom_000.vxl", "--out", "m.ckpt", "--log", "log.jsonl", "--variant",
            "baseline", "--epochs", "2", "--batch-size", "4", "--patches-per-volume", "12",
        ],
    );
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    let ck = checkpoint::load(p.join("m.ckpt")).unwrap();
    assert_eq!(ck.manifest["epochs_run"], 2);
    let log = std::fs::read_to_string(p.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let mc = biqt(p, &["sr", "--checkpoint", "m.ckpt", "--input", "data/phantom_001_lr.vxl", "--output", "sr.vxl", "--mc", "5"]);
    assert_eq!(code(&mc), 2, "deterministic variant with --mc 5");

    let sr = biqt(p, &["sr", "--checkpoint", "m.ckpt", "--input", "data/phantom_001_lr.vxl", "--output", "sr.vxl"]);
    assert_eq!(code(&sr), 0, "{}", String::from_utf8_lossy(&sr.stderr));
    assert_eq!(load_volume(p.join("sr.vxl")).unwrap().dims(), [24; 3]);

    let ev = biqt(
        p,
        &["eval", "--prediction", "sr.vxl", "--truth", "data/phantom_001.vxl", "--export-dir", "png", "--export-format", "csv"],
    );
    assert_eq!(code(&ev), 0, "{}", String::from_utf8_lossy(&ev.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&ev.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.iter().any(|r| r["metric"] == "rmse" && r["region"] == "interior"));
    assert!(lines.iter().any(|r| r["metric"] == "mssim" && r["region"] == "exterior"));
    let csv = std::fs::read_to_string(p.join("png/abs_error.csv")).unwrap();
    assert_eq!(csv.lines().count(), 24);
}

#[test]
fn ensemble_training_and_fused_sr() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_small(p);
    let o = biqt(
        p,
        &[
            "train-ensemble", "--volume", "data/phantom_000.vxl", "--out", "ens", "--variant", "hetero",
            "--ensemble-size", "2", "--epochs", "1", "--batch-size", "4", "--patches-per-volume", "8",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = checkpoint::load(p.join("ens/member_000.ckpt")).unwrap();
    let b = checkpoint::load(p.join("ens/member_001.ckpt")).unwrap();
    assert_ne!(a.params, b.params);
    let sr = biqt(
        p,
        &[
            "sr", "--checkpoint", "ens/member_000.ckpt", "--checkpoint", "ens/member_001.ckpt", "--input",
            "data/phantom_001_lr.vxl", "--output", "fused.vxl",
        ],
    );
    assert_eq!(code(&sr), 0, "{}", String::from_utf8_lossy(&sr.stderr));
    let var = load_volume(p.join("fused.var.vxl")).unwrap();
    assert!(var.data().iter().all(|&v| v > 0.0));
}

#[test]
fn scalar_map_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_small(p);
    let o = biqt(
        p,
        &[
            "train", "--volume", "data/phantom_000.vxl", "--out", "m.ckpt", "--variant", "baseline+vd2", "--epochs", "1",
            "--batch-size", "4", "--patches-per-volume", "8",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sr = biqt(
        p,
        &["sr", "--checkpoint", "m.ckpt", "--input", "data/phantom_001_lr.vxl", "--output", "t.vxl", "--mc", "3", "--map", "fa"],
    );
    assert_eq!(code(&sr), 0, "{}", String::from_utf8_lossy(&sr.stderr));
    for f in ["t.vxl", "t.var.vxl", "t.fa.mean.vxl", "t.fa.var.vxl"] {
        assert!(p.join(f).is_file(), "{f}");
    }
    assert_eq!(load_volume(p.join("t.fa.mean.vxl")).unwrap().channels(), 1);
}

#[test]
fn gradcheck_reports_every_entry() {
    let dir = tempfile::tempdir().unwrap();
    let o = biqt(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.contains("\"passed\":true")));
}
