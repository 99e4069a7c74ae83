//! End-to-end command-line tests, including the bitwise-determinism
//! acceptance criterion (two identical training runs produce identical
//! checkpoint and metrics files).

use std::path::Path;
use std::process::Command;

fn align() -> Command {
    Command::new(env!("CARGO_BIN_EXE_align"))
}

/// Small config that exercises every stage quickly.
const SMALL_CFG: &str = "\
input_size=16
block_channels=4,6
c_i=2
c_p=4
lstm_hidden=8
id_feature=8
n_identities=2
t=2
clips_per_identity=2
val_clips_per_identity=1
epochs_stage1=2
epochs_stage2=1
epochs_stage3=1
batch_clips=2
seed=11
";

fn write_cfg(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, SMALL_CFG).unwrap();
    path
}

#[test]
fn gen_data_writes_manifest_and_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let status = align()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        let manifest = std::fs::read_to_string(out.join("train.manifest.txt")).unwrap();
        assert!(manifest.contains("identities=2"));
        assert!(manifest.contains("clips=4"));
    }
    let a = std::fs::read(dir.path().join("a/train.rnds")).unwrap();
    let b = std::fs::read(dir.path().join("b/train.rnds")).unwrap();
    assert_eq!(a, b, "same seed must produce identical dataset files");
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "flux_capacitor=1\n").unwrap();
    let out = align()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("flux_capacitor"), "{stderr}");
}

#[test]
fn oracle_eval_reports_zero_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let out = dir.path().join("o");
    assert!(align()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    let result = align()
        .args(["eval", "--oracle", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(out.join("train.rnds"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(result.status.success());
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("failure 0.00%"), "{stdout}");
    assert!(out.join("report.json").exists());
    assert!(out.join("ced.csv").exists());
}

#[test]
fn criterion_9_train_twice_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let data_dir = dir.path().join("data");
    assert!(align()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data_dir)
        .status()
        .unwrap()
        .success());
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        let status = align()
            .args(["train", "--workers", "1", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(data_dir.join("train.rnds"))
            .arg("--val")
            .arg(data_dir.join("val.rnds"))
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let ckpt1 = std::fs::read(dir.path().join("r1/ckpt_final.redc")).unwrap();
    let ckpt2 = std::fs::read(dir.path().join("r2/ckpt_final.redc")).unwrap();
    assert_eq!(ckpt1, ckpt2, "checkpoints must match bitwise");
    let m1 = std::fs::read(dir.path().join("r1/metrics.jsonl")).unwrap();
    let m2 = std::fs::read(dir.path().join("r2/metrics.jsonl")).unwrap();
    assert_eq!(m1, m2, "metrics files must match bitwise");
    assert!(!m1.is_empty());
    println!("[criterion 9] PASS determinism: checkpoints and metrics bitwise identical across runs");
}

#[test]
fn train_then_infer_emits_cr_landmarks_and_eval_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let out = dir.path().join("o");
    assert!(align()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    assert!(align()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    assert!(out.join("ckpt_final.redc").exists());
    assert!(out.join("metrics.jsonl").exists());

    // infer on clip 0: exactly C_r fine landmark entries per frame
    let result = align()
        .args(["infer", "--checkpoint"])
        .arg(out.join("ckpt_final.redc"))
        .arg("--data")
        .arg(out.join("train.rnds"))
        .args(["--clip", "0", "--dump-maps"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(result.status.success());
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("landmarks.json")).unwrap())
            .unwrap();
    let frames = doc["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 2);
    assert_eq!(frames[0]["landmarks"].as_array().unwrap().len(), 18);
    assert_eq!(frames[0]["coarse"].as_array().unwrap().len(), 7);
    assert!(out.join("heatmap_f0.rnt4").exists());

    // eval with the trained checkpoint
    let result = align()
        .args(["eval", "--checkpoint"])
        .arg(out.join("ckpt_final.redc"))
        .arg("--data")
        .arg(out.join("val.rnds"))
        .arg("--out")
        .arg(dir.path().join("evalout"))
        .output()
        .unwrap();
    assert!(result.status.success());

    // resume with a different config is an integrity error (exit 3)
    let cfg2 = dir.path().join("other.cfg");
    std::fs::write(&cfg2, SMALL_CFG.replace("seed=11", "seed=12")).unwrap();
    let result = align()
        .args(["train", "--config"])
        .arg(&cfg2)
        .arg("--resume")
        .arg(out.join("ckpt_final.redc"))
        .arg("--data")
        .arg(out.join("train.rnds"))
        .arg("--val")
        .arg(out.join("val.rnds"))
        .arg("--out")
        .arg(dir.path().join("resume_out"))
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(3));
}
