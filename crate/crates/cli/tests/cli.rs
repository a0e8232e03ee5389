use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qica_core::backbone::{TextEncoderConfig, VisionEncoderConfig};
use qica_core::decoder::DecoderConfig;
use qica_core::harness::TrainConfig;
use qica_core::ModelConfig;

fn qica(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_qica"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn qica");
    out
}

fn ok(args: &[&str]) -> String {
    let out = qica(args);
    assert!(
        out.status.success(),
        "qica {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        text: TextEncoderConfig {
            num_layers: 2,
            width: 16,
            num_heads: 2,
            prompt_depth: 2,
            prompt_length: 2,
            max_seq_len: 8,
            mlp_ratio: 2,
        },
        vision: VisionEncoderConfig {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            num_layers: 3,
            width: 24,
            num_heads: 2,
            skip_stage_indices: vec![1, 2],
            mlp_ratio: 2,
        },
        decoder: DecoderConfig {
            width: 16,
            num_heads: 2,
            window: 2,
            ..DecoderConfig::default()
        },
        max_count: 64,
        ..ModelConfig::default()
    }
}

fn write_config(dir: &Path, manifests: Option<(&Path, &Path)>) -> PathBuf {
    let model = tiny_model();
    let config = TrainConfig {
        prompt_depth: model.text.prompt_depth,
        prompt_length: model.text.prompt_length,
        model,
        epochs: 2,
        batch_size: 2,
        train_manifest: manifests.map(|m| m.0.to_path_buf()),
        val_manifest: manifests.map(|m| m.1.to_path_buf()),
        ..TrainConfig::default()
    };
    let path = dir.join("config.json");
    config.save(&path).unwrap();
    path
}

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let bare = write_config(root, None);
    let listed = ok(&[
        "gen-data", "--out", data.to_str().unwrap(), "--splits", "train,val,test",
        "--category", "circles,squares", "--min-count", "1", "--max-count", "5",
        "--seed", "3", "--scenes", "4", "--config", bare.to_str().unwrap(),
    ]);
    let manifests: Vec<PathBuf> = listed.lines().map(PathBuf::from).collect();
    assert_eq!(manifests.len(), 3);
    assert!(manifests.iter().all(|m| m.exists()));
    let first_density = std::fs::read(data.join("train/00000.qdm")).unwrap();
    assert_eq!(&first_density[..4], b"QDM1");

    let config = write_config(root, Some((&manifests[0], &manifests[1])));
    let run = root.join("run");
    let trained = ok(&["train", "--config", config.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(trained.contains("best epoch"));
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let ckpt = run.join("best.ckpt.json");

    let eval = ok(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--manifest", manifests[2].to_str().unwrap()]);
    assert!(eval.starts_with("mae "), "{eval}");

    let pred_dir = root.join("pred");
    let image = data.join("test/00001.png");
    let pred = ok(&[
        "predict", "--ckpt", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(),
        "--text", "a photo of squares", "--out", pred_dir.to_str().unwrap(),
    ]);
    assert!(pred.contains("count"), "{pred}");
    assert!(pred_dir.join("density.qdm").exists());
    assert!(pred_dir.join("heatmap.png").exists());

    let numbered = qica(&[
        "predict", "--ckpt", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(),
        "--text", "a photo of 4 squares", "--out", pred_dir.to_str().unwrap(),
    ]);
    assert!(!numbered.status.success());

    let grad = ok(&["gradcheck", "--config", bare.to_str().unwrap(), "--coords", "3"]);
    assert_eq!(grad.lines().filter(|l| l.ends_with(" ok")).count(), 8, "{grad}");
}

#[test]
fn rejects_unknown_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"learning_rate": 0.001, "lr": 1}"#).unwrap();
    let out = qica(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
}

#[test]
fn rejects_inverted_count_range() {
    let dir = tempfile::tempdir().unwrap();
    let out = qica(&["gen-data", "--out", dir.path().to_str().unwrap(), "--min-count", "9", "--max-count", "3"]);
    assert!(!out.status.success());
}
