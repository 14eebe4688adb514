use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vlscene_core::metrics::GroundingPrediction;
use vlscene_core::records::{self, Record};
use vlscene_core::runs::{self, RunConfig};

const SMALL: &str = r#"
seed = 11
[data]
clean_train_scenes = 3
clean_eval_scenes = 2
objects_per_scene = 3
synth_scenes = 2
[train]
lr_backbone = 1e-2
lr_rest = 1e-2
batch_size = 3
descriptions_per_cloud = 3
max_steps = 6
[pretrain]
lr_backbone = 1e-2
lr_rest = 1e-2
batch_size = 4
descriptions_per_cloud = 1
max_steps = 6
"#;

fn vlscene(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlscene"))
        .args(args)
        .env_remove("VLSCENE_DATA_ROOT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = vlscene(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path
}

fn pipeline(dir: &Path, config: &Path) {
    let data = dir.join("data");
    ok(&["synth-gen", "--config", p(config), "--out", p(&data)]);
    ok(&["pretrain", "--config", p(config), "--data", p(&data), "--out", p(&dir.join("pre"))]);
    let ck = dir.join("pre/checkpoint");
    ok(&["joint-train", "--config", p(config), "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&dir.join("joint"))]);
    let jck = dir.join("joint/checkpoint");
    for task in ["grounding", "captioning", "detection"] {
        let out = dir.join(format!("eval_{task}"));
        ok(&["eval", task, "--config", p(config), "--data", p(&data), "--checkpoint", p(&jck), "--out", p(&out)]);
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, &config);
    pipeline(&b, &config);
    for f in [
        "pre/loss.csv",
        "joint/loss.csv",
        "eval_grounding/grounding_metrics.csv",
        "eval_captioning/captioning_metrics.csv",
        "eval_detection/detection_metrics.csv",
    ] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs");
    }
    let csv = std::fs::read_to_string(a.join("eval_captioning/captioning_metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,iou,precision,recall,f1\n"));
    assert!(csv.contains("METEOR,0.5,,,"));
}

#[test]
fn seed_flag_changes_the_data() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    ok(&["synth-gen", "--config", p(&config), "--out", p(&tmp.path().join("x"))]);
    ok(&["synth-gen", "--config", p(&config), "--seed", "12", "--out", p(&tmp.path().join("y"))]);
    let read = |d: &str| std::fs::read(tmp.path().join(d).join(runs::CLEAN_TRAIN_FILE)).unwrap();
    assert_ne!(read("x"), read("y"));
}

#[test]
fn invalid_config_reports_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nn_heads = 3\n").unwrap();
    let out = vlscene(&["synth-gen", "--config", p(&bad), "--out", p(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.n_heads"), "{err}");

    std::fs::write(&bad, "[train]\nlearning_rate = 3\n").unwrap();
    let out = vlscene(&["synth-gen", "--config", p(&bad), "--out", p(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn finetune_requires_an_existing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth-gen", "--config", p(&config), "--out", p(&data)]);
    let out = vlscene(&["finetune", "grounding", "--config", p(&config), "--data", p(&data), "--out", p(&tmp.path().join("f"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
    let missing = tmp.path().join("missing");
    let out = vlscene(&[
        "finetune", "captioning", "--config", p(&config), "--data", p(&data), "--checkpoint", p(&missing), "--out",
        p(&tmp.path().join("f")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn data_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth-gen", "--config", p(&config), "--out", p(&data)]);
    let out = Command::new(env!("CARGO_BIN_EXE_vlscene"))
        .args(["joint-train", "--config", p(&config), "--out", p(&tmp.path().join("j"))])
        .env("VLSCENE_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("j/loss.csv").exists());
}

#[test]
fn ground_truth_predictions_score_one_hundred() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth-gen", "--config", p(&config), "--out", p(&data)]);
    let cfg = RunConfig::load(&config).unwrap();
    let scenes = runs::load_scenes(&data.join(runs::CLEAN_EVAL_FILE), &cfg).unwrap();
    let mut recs = Vec::new();
    for s in &scenes {
        for (i, d) in s.descriptions.iter().enumerate() {
            let o = s.object(d.target).unwrap();
            recs.push(Record::GroundingPrediction(GroundingPrediction {
                query_id: format!("{}/{i}", s.scene_id),
                scene_id: s.scene_id.clone(),
                pred_box: o.aabb,
                gt_box: o.aabb,
                gt_class: o.semantic_class,
            }));
        }
    }
    let preds = tmp.path().join("gt.jsonl");
    records::save(&preds, &cfg.header(), &recs).unwrap();
    let out_dir = tmp.path().join("eval");
    ok(&["eval", "grounding", "--config", p(&config), "--data", p(&data), "--predictions", p(&preds), "--out", p(&out_dir)]);
    let csv = std::fs::read_to_string(out_dir.join(runs::GROUNDING_CSV)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iou,unique,multiple,overall,n_unique,n_multiple"));
    for line in lines {
        assert_eq!(line.split(',').nth(3), Some("100.00"), "{csv}");
    }
}

#[test]
fn report_collates_ablation_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["synth-gen", "--config", p(&config), "--out", p(&data)]);
    for preset in ["b", "e"] {
        ok(&["ablation", preset, "--config", p(&config), "--data", p(&data), "--out", p(&tmp.path().join(preset))]);
    }
    let out = vlscene(&["report", "--out", p(&tmp.path().join("r")), p(&tmp.path().join("b")), p(&tmp.path().join("e"))]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("Training setup,Synthetic,ScanRefer,Bidirectional,Seq-to-Seq,Unique@0.5IoU"));
    assert!(rows[1].starts_with("(b) joint from scratch"));
    assert!(rows[2].starts_with("(e) joint fine-tuned,x,x"));
    assert_eq!(std::fs::read_to_string(tmp.path().join("r/report.csv")).unwrap(), table);
    assert!(!vlscene(&["ablation", "z", "--data", "x", "--out", "y"]).status.success());
}
