use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use promptpaint::dataset::scene_from_seed;
use promptpaint::imageio::{load_rgb, save_mask, save_rgb};
use promptpaint::maskgen::bbox_mask;
use promptpaint::trainer::{read_log, RunConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_promptpaint"));
    c.env_remove("PROMPTPAINT_CHECKPOINT").env_remove("PROMPTPAINT_BIND");
    c
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn toy_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string(&RunConfig::toy()).unwrap()).unwrap();
    p
}

#[test]
fn train_then_inpaint_through_the_env_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let run = dir.path().join("run");
    ok(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap());
    assert!(run.join("latest").is_file());
    assert_eq!(read_log(&run.join("train_log.jsonl")).unwrap().len(), 3);

    let scene = scene_from_seed(3, &RunConfig::toy().scene).unwrap();
    save_rgb(&dir.path().join("in.png"), &scene.image).unwrap();
    save_mask(&dir.path().join("mask.png"), &bbox_mask(scene.objects[0].bbox, 8, 8).unwrap()).unwrap();
    let out = ok(bin()
        .env("PROMPTPAINT_CHECKPOINT", &run)
        .args(["inpaint", "--mode", "shape", "--caption", "a red circle", "--alpha", "0.95", "--steps", "2"])
        .arg("--image")
        .arg(dir.path().join("in.png"))
        .arg("--mask")
        .arg(dir.path().join("mask.png"))
        .arg("--out")
        .arg(dir.path().join("out.png"))
        .output()
        .unwrap());
    let meta: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(meta["request"]["alpha"], 0.95);
    assert_eq!(meta["request"]["mode"], "shape");
    assert_eq!(load_rgb(&dir.path().join("out.png")).unwrap().shape(), [8, 8, 3]);
}

#[test]
fn inpaint_rejects_inconsistent_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let run = dir.path().join("run");
    let mut c = RunConfig::toy();
    c.train.steps = 0;
    fs::write(&cfg, serde_json::to_string(&c).unwrap()).unwrap();
    ok(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap());
    let scene = scene_from_seed(3, &c.scene).unwrap();
    save_rgb(&dir.path().join("in.png"), &scene.image).unwrap();
    save_mask(&dir.path().join("mask.png"), &bbox_mask(scene.objects[0].bbox, 8, 8).unwrap()).unwrap();
    let out = bin()
        .args(["inpaint", "--mode", "context", "--caption", "a red circle", "--checkpoint"])
        .arg(&run)
        .arg("--image")
        .arg(dir.path().join("in.png"))
        .arg("--mask")
        .arg(dir.path().join("mask.png"))
        .arg("--out")
        .arg(dir.path().join("out.png"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("caption"));
}

#[test]
fn make_dataset_writes_manifest_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out = dir.path().join("data");
    ok(bin()
        .args(["make-dataset", "--count", "5", "--seed", "9", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for l in &lines {
        for key in ["id", "image_path", "mask_path", "caption", "task", "bbox", "k", "it", "alpha", "seed"] {
            assert!(l.get(key).is_some(), "missing {key} in {l}");
        }
        assert!(out.join(l["image_path"].as_str().unwrap()).is_file());
        assert!(out.join(l["mask_path"].as_str().unwrap()).is_file());
    }
}

#[test]
fn serve_reads_the_checkpoint_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = bin()
        .env("PROMPTPAINT_CHECKPOINT", &missing)
        .env("PROMPTPAINT_BIND", "127.0.0.1:0")
        .arg("serve")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn evaluate_refuses_an_ungated_extractor() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["evaluate", "--checkpoint"])
        .arg(dir.path())
        .arg("--extractor")
        .arg(dir.path())
        .arg("--report")
        .arg(dir.path().join("r.json"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}
