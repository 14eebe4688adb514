use std::path::Path;

use vlscene_core::losses::Stage;
use vlscene_core::metrics::GroundingPrediction;
use vlscene_core::records::{self, Record};
use vlscene_core::runs::{
    self, git_style_hash, AblationPreset, EvalSource, EvalTask, RunConfig, RunContext, RunError, RunManifest,
    REPORT_HEADER,
};

const SMALL: &str = r#"
seed = 5
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
max_steps = 5
[pretrain]
lr_backbone = 1e-2
lr_rest = 1e-2
batch_size = 4
descriptions_per_cloud = 1
max_steps = 5
"#;

fn small() -> RunConfig {
    RunConfig::from_toml_str(SMALL, "small").unwrap()
}

fn ctx(dir: &Path, sub: &str) -> RunContext {
    RunContext::new(small(), None, dir.join(sub))
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join(runs::MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn synth_gen_writes_data_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    runs::synth_gen(&ctx(dir.path(), "data")).unwrap();
    let data = dir.path().join("data");
    let scenes = runs::load_scenes(&data.join(runs::CLEAN_TRAIN_FILE), &small()).unwrap();
    assert_eq!(scenes.len(), 3);
    assert!(scenes.iter().all(|s| s.objects.len() == 3));
    let m = manifest(&data);
    assert_eq!((m.command.as_str(), m.seed), ("synth-gen", 5));
    assert!(m.outputs.contains(&runs::SYNTH_FILE.to_string()));
    assert!(m.finished_unix >= m.started_unix);
}

#[test]
fn finetuning_without_a_checkpoint_fails_clearly() {
    let dir = tempfile::tempdir().unwrap();
    runs::synth_gen(&ctx(dir.path(), "data")).unwrap();
    let missing = dir.path().join("nope");
    let err = runs::train(&ctx(dir.path(), "ft"), Stage::FinetuneGrounding, &dir.path().join("data"), Some(&missing)).unwrap_err();
    assert!(matches!(err, RunError::MissingCheckpoint(_)), "{err}");
    let err = runs::train(&ctx(dir.path(), "ft"), Stage::Joint, &dir.path().join("absent"), None).unwrap_err();
    assert!(matches!(err, RunError::MissingInput(_)), "{err}");
}

#[test]
fn exact_predictions_score_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    runs::synth_gen(&ctx(dir.path(), "data")).unwrap();
    let data = dir.path().join("data");
    let cfg = small();
    let scenes = runs::load_scenes(&data.join(runs::CLEAN_EVAL_FILE), &cfg).unwrap();
    let recs: Vec<Record> = scenes
        .iter()
        .flat_map(|s| {
            s.objects.iter().map(move |o| {
                Record::GroundingPrediction(GroundingPrediction {
                    query_id: format!("{}/{}", s.scene_id, o.instance_id),
                    scene_id: s.scene_id.clone(),
                    pred_box: o.aabb,
                    gt_box: o.aabb,
                    gt_class: o.semantic_class,
                })
            })
        })
        .collect();
    let pred_path = dir.path().join("preds.jsonl");
    records::save(&pred_path, &cfg.header(), &recs).unwrap();
    runs::eval(&ctx(dir.path(), "eval"), EvalTask::Grounding, &data, &EvalSource::Predictions(pred_path.clone())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("eval").join(runs::GROUNDING_CSV)).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[3] == "100.00"), "{csv}");
    let m = manifest(&dir.path().join("eval"));
    let input = m.inputs.iter().find(|i| i.path.ends_with("preds.jsonl")).unwrap();
    assert_eq!(input.hash, git_style_hash(&std::fs::read(&pred_path).unwrap()));
}

#[test]
fn ablation_and_report_produce_the_table() {
    let dir = tempfile::tempdir().unwrap();
    runs::synth_gen(&ctx(dir.path(), "data")).unwrap();
    let data = dir.path().join("data");
    runs::ablation(&ctx(dir.path(), "a"), AblationPreset::A, &data).unwrap();
    runs::ablation(&ctx(dir.path(), "c"), AblationPreset::C, &data).unwrap();
    let table = runs::report(&[dir.path().join("a"), dir.path().join("c")], &dir.path().join("report")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], REPORT_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("(a) direct from scratch,,x,"));
    assert!(lines[2].starts_with("(c) initial pre-trained,x,,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 12));
    assert!(dir.path().join("a/grounding/checkpoint/params.bin").exists());
    assert!(dir.path().join("a/captioning/loss.csv").exists());
}

#[test]
fn vocabulary_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    runs::synth_gen(&ctx(dir.path(), "data")).unwrap();
    let data = dir.path().join("data");
    runs::train(&ctx(dir.path(), "j"), Stage::Joint, &data, None).unwrap();
    std::fs::write(data.join(runs::VOCAB_FILE), "#specials [PAD]=0 [UNK]=1 [CLS]=2 [SEP]=3\nthe\n").unwrap();
    let ck = dir.path().join("j").join(runs::CHECKPOINT_DIR);
    assert!(runs::train(&ctx(dir.path(), "k"), Stage::Joint, &data, Some(&ck)).is_err());
}

#[test]
fn bad_configs_point_at_the_field() {
    for (text, field) in [
        ("[data]\nobjects_per_scene = 0\n", "data.objects_per_scene"),
        ("[pipeline]\nframe_stride = 0\n", "pipeline.frame_stride"),
        ("[pretrain]\neps = 0.0\n", "pretrain.eps"),
        ("[model]\nd_model = 0\n", "model.d_model"),
    ] {
        let err = RunConfig::from_toml_str(text, "t").unwrap_err().to_string();
        assert!(err.contains(field), "{text}: {err}");
    }
    assert!(RunConfig::from_toml_str("[train]\nlr = 1\n", "t").is_err());
    assert!(RunConfig::load(Path::new("/definitely/not/here.toml")).is_err());
}
