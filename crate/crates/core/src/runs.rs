//! Reproducible command runs: configuration files, run manifests, and the
//! data-generation, training, evaluation, ablation and report commands.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::geometry::{aabb_from_mask, GeometryError};
use crate::inference::{dense_caption_scene, ground_features, DecodeConfig};
use crate::losses::Stage;
use crate::metrics::{
    acc_at_kiou, caption_report, map_at_k, DenseCapGroundTruth, DenseCapGtItem, DenseCapPrediction, Detection,
    GroundingPrediction, GtObject, MetricError, SentenceMetric, THRESHOLDS,
};
use crate::model::{ClsSource, Model, ModelConfig, ModelError};
use crate::records::{self, Header, Record, RecordError};
use crate::synthpipe::{
    derive_seed, generate_scenes, synth_pipeline, CameraRig, PipelineConfig, Scene, SceneConfig, SynthError,
    SynthPair, TagSimilarity, TemplateCaptioner,
};
use crate::textproc::{TextError, Vocabulary};
use crate::training::{loss_csv, run_stage, TrainConfig, TrainError, TrainSet};

pub const CLEAN_TRAIN_FILE: &str = "clean_train.jsonl";
pub const CLEAN_EVAL_FILE: &str = "clean_eval.jsonl";
pub const SYNTH_FILE: &str = "synth_pairs.jsonl";
pub const REJECTED_FILE: &str = "synth_rejected.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const GROUNDING_CSV: &str = "grounding_metrics.csv";
pub const CAPTIONING_CSV: &str = "captioning_metrics.csv";
pub const DETECTION_CSV: &str = "detection_metrics.csv";
pub const SETUP_FILE: &str = "setup.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config {path}: {message}")]
    ConfigParse { path: String, message: String },
    #[error("invalid config: field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("checkpoint directory {0} does not exist")]
    MissingCheckpoint(PathBuf),
    #[error("required input {0} does not exist")]
    MissingInput(PathBuf),
    #[error("{0}")]
    Input(String),
    #[error("I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>, RunError> {
    if !path.exists() {
        return Err(RunError::MissingInput(path.to_path_buf()));
    }
    std::fs::read(path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    pub clean_train_scenes: usize,
    pub clean_eval_scenes: usize,
    pub objects_per_scene: usize,
    pub synth_scenes: usize,
    pub synth_objects_per_scene: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            clean_train_scenes: 20,
            clean_eval_scenes: 10,
            objects_per_scene: 4,
            synth_scenes: 40,
            synth_objects_per_scene: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub n_frames: usize,
    pub frame_stride: usize,
    pub top_k: usize,
    pub sim_threshold: f64,
    pub caption_noise: f64,
    pub rig: CameraRig,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            n_frames: p.n_frames,
            frame_stride: p.frame_stride,
            top_k: p.top_k,
            sim_threshold: p.sim_threshold,
            caption_noise: p.caption_noise,
            rig: p.rig,
        }
    }
}

/// Model hyper-parameters; vocabulary size, class count and point width
/// come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_fusion_layers: usize,
    pub n_text_layers: usize,
    pub ffn_dim: usize,
    pub max_boxes: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub cls_source: ClsSource,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let t = ModelConfig::tiny(1, 1, 3);
        Self {
            d_model: t.d_model,
            n_heads: t.n_heads,
            n_fusion_layers: t.n_fusion_layers,
            n_text_layers: t.n_text_layers,
            ffn_dim: t.ffn_dim,
            max_boxes: t.max_boxes,
            max_len: t.max_len,
            dropout: t.dropout,
            cls_source: t.cls_source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub batch_size: usize,
    pub descriptions_per_cloud: usize,
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub plateau_window: usize,
    pub plateau_tol: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::new(Stage::Joint);
        Self {
            lr_backbone: t.lr_backbone,
            lr_rest: t.lr_rest,
            batch_size: t.batch_size,
            descriptions_per_cloud: t.descriptions_per_cloud,
            max_steps: t.max_steps,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            plateau_window: t.plateau_window,
            plateau_tol: t.plateau_tol,
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self, stage: Stage, seed: u64) -> TrainConfig {
        TrainConfig {
            stage,
            lr_backbone: self.lr_backbone,
            lr_rest: self.lr_rest,
            batch_size: self.batch_size,
            descriptions_per_cloud: self.descriptions_per_cloud,
            max_steps: self.max_steps,
            seed,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            plateau_window: self.plateau_window,
            plateau_tol: self.plateau_tol,
        }
    }
}

/// Contents of a run configuration file. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub data: DataSettings,
    pub pipeline: PipelineSettings,
    pub model: ModelSettings,
    /// Settings for clean-data stages.
    pub train: TrainSettings,
    /// Settings for the synthetic pre-training stage; falls back to `train`.
    pub pretrain: Option<TrainSettings>,
}

fn field_err(prefix: &str, e: impl std::fmt::Display) -> RunError {
    // the inner errors already read "...: field `x`: message"
    let text = e.to_string();
    match text.split_once("field `").and_then(|(_, rest)| rest.split_once("`: ")) {
        Some((field, message)) => RunError::Config {
            field: format!("{prefix}.{field}"),
            message: message.to_string(),
        },
        None => RunError::Config {
            field: prefix.to_string(),
            message: text,
        },
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, RunError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RunError::ConfigParse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| RunError::ConfigParse {
            path: path.display().to_string(),
            message: "not UTF-8".into(),
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.scene.validate().map_err(|e| field_err("scene", e))?;
        self.pipeline_config().validate().map_err(|e| field_err("pipeline", e))?;
        self.model_config(4).validate().map_err(|e| field_err("model", e))?;
        self.train
            .to_config(Stage::Joint, self.seed)
            .validate()
            .map_err(|e| field_err("train", e))?;
        if let Some(p) = &self.pretrain {
            p.to_config(Stage::Pretrain, self.seed)
                .validate()
                .map_err(|e| field_err("pretrain", e))?;
        }
        let d = &self.data;
        let combos = self.scene.classes.len() * self.scene.colors.len() * self.scene.sizes.len();
        for (field, n) in [
            ("objects_per_scene", d.objects_per_scene),
            ("synth_objects_per_scene", d.synth_objects_per_scene),
        ] {
            if n == 0 || n > combos {
                return Err(RunError::Config {
                    field: format!("data.{field}"),
                    message: format!("must lie in 1..={combos}"),
                });
            }
        }
        if self.model.max_len < 3 {
            return Err(RunError::Config {
                field: "model.max_len".into(),
                message: "must be at least 3".into(),
            });
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let p = &self.pipeline;
        PipelineConfig {
            n_frames: p.n_frames,
            frame_stride: p.frame_stride,
            top_k: p.top_k,
            sim_threshold: p.sim_threshold,
            caption_noise: p.caption_noise,
            seed: derive_seed(&[self.seed, 4]),
            rig: p.rig.clone(),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_fusion_layers: m.n_fusion_layers,
            n_text_layers: m.n_text_layers,
            ffn_dim: m.ffn_dim,
            vocab_size,
            max_boxes: m.max_boxes,
            max_len: m.max_len,
            n_semantic_classes: self.scene.n_classes(),
            point_feature_dim: 3 + self.scene.aux_dim(),
            dropout: m.dropout,
            cls_source: m.cls_source,
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let settings = match (stage, &self.pretrain) {
            (Stage::Pretrain, Some(p)) => p,
            _ => &self.train,
        };
        settings.to_config(stage, self.seed)
    }

    pub fn header(&self) -> Header {
        Header::new(self.scene.aux_dim(), self.scene.class_names())
    }
}

/// `sha256("blob <len>\0" ++ bytes)`, hex encoded.
pub fn git_style_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a file, or of a directory as the sorted list of its files' hashes.
pub fn hash_path(path: &Path) -> Result<String, RunError> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        let mut listing = String::new();
        for e in entries {
            let name = e.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let _ = writeln!(listing, "{} {name}", hash_path(&e)?);
        }
        Ok(git_style_hash(listing.as_bytes()))
    } else {
        Ok(git_style_hash(&read_file(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub tool_version: String,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Common run context shared by all commands.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: RunConfig,
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
}

impl RunContext {
    pub fn new(config: RunConfig, config_path: Option<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            config_path,
            out: out.into(),
        }
    }

    fn with_out(&self, out: PathBuf) -> Self {
        Self {
            out,
            ..self.clone()
        }
    }
}

struct ManifestBuilder {
    command: String,
    started: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl ManifestBuilder {
    fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            started: now_unix(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn write(self, ctx: &RunContext) -> Result<RunManifest, RunError> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                Ok(InputHash {
                    path: p.display().to_string(),
                    hash: hash_path(p)?,
                })
            })
            .collect::<Result<Vec<_>, RunError>>()?;
        let config_hash = match &ctx.config_path {
            Some(p) => Some(hash_path(p)?),
            None => None,
        };
        let manifest = RunManifest {
            command: self.command,
            config_path: ctx.config_path.as_ref().map(|p| p.display().to_string()),
            config_hash,
            seed: ctx.config.seed,
            inputs,
            outputs: self.outputs,
            started_unix: self.started,
            finished_unix: now_unix(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&ctx.out.join(MANIFEST_FILE), json + "\n")?;
        Ok(manifest)
    }
}

/// The vocabulary every run shares: specials plus all template words.
pub fn template_vocabulary(scene: &SceneConfig) -> Vocabulary {
    Vocabulary::build(&scene.template_corpus(), 1)
}

/// Generates clean train/eval scenes and the synthetic pair dataset.
pub fn synth_gen(ctx: &RunContext) -> Result<RunManifest, RunError> {
    let cfg = &ctx.config;
    let mut mb = ManifestBuilder::new("synth-gen");
    let d = &cfg.data;
    let train = generate_scenes(
        &cfg.scene,
        "clean-train",
        derive_seed(&[cfg.seed, 1]),
        d.clean_train_scenes,
        d.objects_per_scene,
    )?;
    let eval = generate_scenes(
        &cfg.scene,
        "clean-eval",
        derive_seed(&[cfg.seed, 2]),
        d.clean_eval_scenes,
        d.objects_per_scene,
    )?;
    let synth_scenes = generate_scenes(
        &cfg.scene,
        "synth",
        derive_seed(&[cfg.seed, 3]),
        d.synth_scenes,
        d.synth_objects_per_scene,
    )?;
    let pipe = cfg.pipeline_config();
    let captioner = TemplateCaptioner::new(&cfg.scene, pipe.caption_noise);
    let out = synth_pipeline(&cfg.scene, &pipe, &synth_scenes, &captioner, &TagSimilarity)?;
    let header = cfg.header();
    let scenes_to_records = |s: &[Scene]| s.iter().cloned().map(Record::Scene).collect::<Vec<_>>();
    std::fs::create_dir_all(&ctx.out).map_err(io_err(&ctx.out))?;
    records::save(&ctx.out.join(CLEAN_TRAIN_FILE), &header, &scenes_to_records(&train))?;
    records::save(&ctx.out.join(CLEAN_EVAL_FILE), &header, &scenes_to_records(&eval))?;
    let pairs: Vec<Record> = out.pairs.iter().cloned().map(Record::SynthPair).collect();
    records::save(&ctx.out.join(SYNTH_FILE), &header, &pairs)?;
    let rejected: Vec<Record> = out.rejected.iter().cloned().map(Record::Rejected).collect();
    records::save(&ctx.out.join(REJECTED_FILE), &header, &rejected)?;
    let stats = serde_json::to_string_pretty(&out.stats).expect("stats serialize");
    write_file(&ctx.out.join(STATS_FILE), stats + "\n")?;
    template_vocabulary(&cfg.scene).save(&ctx.out.join(VOCAB_FILE))?;
    for f in [CLEAN_TRAIN_FILE, CLEAN_EVAL_FILE, SYNTH_FILE, REJECTED_FILE, STATS_FILE, VOCAB_FILE] {
        mb.output(f);
    }
    if let Some(p) = &ctx.config_path {
        mb.input(p);
    }
    mb.write(ctx)
}

fn check_header(path: &Path, header: &Header, cfg: &RunConfig) -> Result<(), RunError> {
    if header.aux_dim != cfg.scene.aux_dim() || header.class_names != cfg.scene.class_names() {
        return Err(RunError::Input(format!(
            "{} was generated for a different scene configuration",
            path.display()
        )));
    }
    Ok(())
}

pub fn load_scenes(path: &Path, cfg: &RunConfig) -> Result<Vec<Scene>, RunError> {
    if !path.exists() {
        return Err(RunError::MissingInput(path.to_path_buf()));
    }
    let (header, recs) = records::load(path)?;
    check_header(path, &header, cfg)?;
    Ok(recs
        .into_iter()
        .filter_map(|r| match r {
            Record::Scene(s) => Some(s),
            _ => None,
        })
        .collect())
}

pub fn load_pairs(path: &Path, cfg: &RunConfig) -> Result<Vec<SynthPair>, RunError> {
    if !path.exists() {
        return Err(RunError::MissingInput(path.to_path_buf()));
    }
    let (header, recs) = records::load(path)?;
    check_header(path, &header, cfg)?;
    Ok(recs
        .into_iter()
        .filter_map(|r| match r {
            Record::SynthPair(p) => Some(p),
            _ => None,
        })
        .collect())
}

fn load_vocab(data: &Path) -> Result<Vocabulary, RunError> {
    let path = data.join(VOCAB_FILE);
    if !path.exists() {
        return Err(RunError::MissingInput(path));
    }
    Ok(Vocabulary::load(&path)?)
}

fn load_checkpoint(dir: &Path) -> Result<(Model<f64>, Vocabulary), RunError> {
    if !dir.is_dir() {
        return Err(RunError::MissingCheckpoint(dir.to_path_buf()));
    }
    Ok(checkpoint::load_model(dir)?)
}

/// Trains one stage, optionally starting from a checkpoint directory.
pub fn train(ctx: &RunContext, stage: Stage, data: &Path, init: Option<&Path>) -> Result<RunManifest, RunError> {
    let cfg = &ctx.config;
    let command = match stage {
        Stage::Pretrain => "pretrain",
        Stage::Joint => "joint-train",
        Stage::FinetuneGrounding => "finetune grounding",
        Stage::FinetuneCaptioning => "finetune captioning",
    };
    let mut mb = ManifestBuilder::new(command);
    let vocab = load_vocab(data)?;
    mb.input(&data.join(VOCAB_FILE));
    let mut model = match init {
        Some(dir) => {
            let (model, ck_vocab) = load_checkpoint(dir)?;
            if ck_vocab != vocab {
                return Err(RunError::Input(format!(
                    "checkpoint {} uses a different vocabulary than {}",
                    dir.display(),
                    data.display()
                )));
            }
            mb.input(dir);
            model
        }
        None => Model::new(cfg.model_config(vocab.len()), cfg.seed)?,
    };
    let set = if stage == Stage::Pretrain {
        let path = data.join(SYNTH_FILE);
        let pairs = load_pairs(&path, cfg)?;
        mb.input(&path);
        TrainSet::from_pairs(&model, &pairs, &vocab)?
    } else {
        let path = data.join(CLEAN_TRAIN_FILE);
        let scenes = load_scenes(&path, cfg)?;
        mb.input(&path);
        TrainSet::from_scenes(&model, &scenes, &vocab, None)?
    };
    let tc = cfg.train_config(stage);
    let outcome = run_stage(&mut model, &tc, &set, |_, _| ControlFlow::Continue(()))?;
    write_file(&ctx.out.join(LOSS_FILE), loss_csv(&outcome.curve))?;
    checkpoint::save_model(&ctx.out.join(CHECKPOINT_DIR), &model, &vocab)?;
    mb.output(LOSS_FILE);
    mb.output(CHECKPOINT_DIR);
    if let Some(p) = &ctx.config_path {
        mb.input(p);
    }
    mb.write(ctx)
}

/// What an evaluation reads: model outputs from a checkpoint, or a
/// prediction record file.
#[derive(Debug, Clone)]
pub enum EvalSource {
    Checkpoint(PathBuf),
    Predictions(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Grounding,
    Captioning,
    Detection,
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub const GROUNDING_CSV_HEADER: &str = "iou,unique,multiple,overall,n_unique,n_multiple";
pub const CAPTIONING_CSV_HEADER: &str = "metric,iou,precision,recall,f1";
pub const DETECTION_CSV_HEADER: &str = "iou,map";

pub fn grounding_csv(preds: &[GroundingPrediction], class_counts: &HashMap<(String, usize), usize>) -> String {
    let mut out = format!("{GROUNDING_CSV_HEADER}\n");
    for k in THRESHOLDS {
        let a = acc_at_kiou(preds, class_counts, k);
        let _ = writeln!(
            out,
            "{k},{},{},{},{},{}",
            pct(a.unique),
            pct(a.multiple),
            pct(a.overall),
            a.n_unique,
            a.n_multiple
        );
    }
    out
}

pub fn captioning_csv(preds: &[DenseCapPrediction], gts: &[DenseCapGroundTruth]) -> Result<String, RunError> {
    let report = caption_report(preds, gts)?;
    let mut out = format!("{CAPTIONING_CSV_HEADER}\n");
    for (m, k, prf) in &report.rows {
        let _ = writeln!(
            out,
            "{},{k},{},{},{}",
            m.label(),
            pct(prf.precision),
            pct(prf.recall),
            pct(prf.f1)
        );
    }
    for k in THRESHOLDS {
        let _ = writeln!(out, "METEOR,{k},,,");
    }
    Ok(out)
}

pub fn detection_csv(dets: &[Detection], gts: &[GtObject]) -> String {
    let mut out = format!("{DETECTION_CSV_HEADER}\n");
    for k in THRESHOLDS {
        let _ = writeln!(out, "{k},{}", pct(map_at_k(dets, gts, k)));
    }
    out
}

/// Number of ground-truth objects per `(scene, class)`.
pub fn class_counts(scenes: &[Scene]) -> HashMap<(String, usize), usize> {
    let mut out = HashMap::new();
    for s in scenes {
        for o in &s.objects {
            *out.entry((s.scene_id.clone(), o.semantic_class)).or_insert(0) += 1;
        }
    }
    out
}

/// Counts distinct ground-truth boxes per `(scene, class)` inside a
/// prediction set, for prediction files evaluated without scene data.
fn class_counts_from_predictions(preds: &[GroundingPrediction]) -> HashMap<(String, usize), usize> {
    let mut seen: HashMap<(String, usize), Vec<crate::geometry::Aabb>> = HashMap::new();
    for p in preds {
        let boxes = seen.entry((p.scene_id.clone(), p.gt_class)).or_default();
        if !boxes.contains(&p.gt_box) {
            boxes.push(p.gt_box);
        }
    }
    seen.into_iter().map(|(k, v)| (k, v.len())).collect()
}

pub fn grounding_predictions(model: &Model<f64>, vocab: &Vocabulary, scenes: &[Scene]) -> Result<Vec<GroundingPrediction>, RunError> {
    let mut out = Vec::new();
    for s in scenes {
        let inst = model.pool(&s.cloud, &s.masks())?;
        for (i, d) in s.descriptions.iter().enumerate() {
            let Some(obj) = s.object(d.target) else { continue };
            let query = vocab.encode(&d.text, model.config().max_len)?;
            let r = ground_features(model, &inst, &query)?;
            out.push(GroundingPrediction {
                query_id: format!("{}/{i}", s.scene_id),
                scene_id: s.scene_id.clone(),
                pred_box: r.aabb,
                gt_box: aabb_from_mask(&s.cloud, &obj.mask)?,
                gt_class: obj.semantic_class,
            });
        }
    }
    Ok(out)
}

pub fn densecap_ground_truth(scenes: &[Scene]) -> Result<Vec<DenseCapGroundTruth>, RunError> {
    scenes
        .iter()
        .map(|s| {
            let items = s
                .objects
                .iter()
                .map(|o| {
                    let refs: Vec<String> = s
                        .descriptions
                        .iter()
                        .filter(|d| d.target == o.instance_id)
                        .map(|d| d.text.clone())
                        .collect();
                    Ok(DenseCapGtItem {
                        aabb: aabb_from_mask(&s.cloud, &o.mask)?,
                        references: refs,
                        semantic_class: o.semantic_class,
                    })
                })
                .collect::<Result<Vec<_>, RunError>>()?
                .into_iter()
                .filter(|i| !i.references.is_empty())
                .collect();
            Ok(DenseCapGroundTruth {
                scene_id: s.scene_id.clone(),
                items,
            })
        })
        .collect()
}

pub fn densecap_predictions(
    model: &Model<f64>,
    vocab: &Vocabulary,
    scenes: &[Scene],
    gts: &[DenseCapGroundTruth],
) -> Result<Vec<DenseCapPrediction>, RunError> {
    let decode = DecodeConfig::new(model.config().max_len)?;
    scenes
        .iter()
        .zip(gts)
        .map(|(s, g)| {
            let boxes: Vec<_> = g.items.iter().map(|i| i.aabb).collect();
            Ok(dense_caption_scene(model, vocab, &s.scene_id, &s.cloud, &s.masks(), &boxes, &decode)?)
        })
        .collect()
}

/// Detections are the dense-captioning boxes, labelled with their
/// proposal's semantic class at confidence 1.0.
pub fn detections(model: &Model<f64>, vocab: &Vocabulary, scenes: &[Scene]) -> Result<(Vec<Detection>, Vec<GtObject>), RunError> {
    let gts = densecap_ground_truth(scenes)?;
    let preds = densecap_predictions(model, vocab, scenes, &gts)?;
    let mut dets = Vec::new();
    let mut objects = Vec::new();
    for (s, p) in scenes.iter().zip(&preds) {
        let boxes: Vec<_> = s
            .objects
            .iter()
            .map(|o| Ok((aabb_from_mask(&s.cloud, &o.mask)?, o.semantic_class)))
            .collect::<Result<Vec<_>, GeometryError>>()?;
        for item in &p.items {
            let class = boxes.iter().find(|(b, _)| *b == item.aabb).map_or(0, |(_, c)| *c);
            dets.push(Detection {
                scene_id: s.scene_id.clone(),
                aabb: item.aabb,
                class,
                confidence: item.confidence,
            });
        }
        objects.extend(boxes.into_iter().map(|(aabb, class)| GtObject {
            scene_id: s.scene_id.clone(),
            aabb,
            class,
        }));
    }
    Ok((dets, objects))
}

/// Evaluates one task and writes its metric CSV (plus predictions when a
/// checkpoint is evaluated).
pub fn eval(ctx: &RunContext, task: EvalTask, data: &Path, source: &EvalSource) -> Result<RunManifest, RunError> {
    let cfg = &ctx.config;
    let name = match task {
        EvalTask::Grounding => "eval grounding",
        EvalTask::Captioning => "eval captioning",
        EvalTask::Detection => "eval detection",
    };
    let mut mb = ManifestBuilder::new(name);
    let eval_path = data.join(CLEAN_EVAL_FILE);
    let header = cfg.header();
    let (csv_name, csv) = match source {
        EvalSource::Predictions(path) => {
            if !path.exists() {
                return Err(RunError::MissingInput(path.clone()));
            }
            mb.input(path);
            let (h, recs) = records::load(path)?;
            check_header(path, &h, cfg)?;
            match task {
                EvalTask::Grounding => {
                    let preds: Vec<GroundingPrediction> = recs
                        .into_iter()
                        .filter_map(|r| match r {
                            Record::GroundingPrediction(p) => Some(p),
                            _ => None,
                        })
                        .collect();
                    let counts = if eval_path.exists() {
                        mb.input(&eval_path);
                        class_counts(&load_scenes(&eval_path, cfg)?)
                    } else {
                        class_counts_from_predictions(&preds)
                    };
                    (GROUNDING_CSV, grounding_csv(&preds, &counts))
                }
                EvalTask::Captioning => {
                    let (mut preds, mut gts) = (Vec::new(), Vec::new());
                    for r in recs {
                        match r {
                            Record::DensecapPrediction(p) => preds.push(p),
                            Record::DensecapGt(g) => gts.push(g),
                            _ => {}
                        }
                    }
                    (CAPTIONING_CSV, captioning_csv(&preds, &gts)?)
                }
                EvalTask::Detection => {
                    let (mut dets, mut gts) = (Vec::new(), Vec::new());
                    for r in recs {
                        match r {
                            Record::Detection(d) => dets.push(d),
                            Record::GtObject(g) => gts.push(g),
                            _ => {}
                        }
                    }
                    (DETECTION_CSV, detection_csv(&dets, &gts))
                }
            }
        }
        EvalSource::Checkpoint(dir) => {
            let (model, vocab) = load_checkpoint(dir)?;
            mb.input(dir);
            let scenes = load_scenes(&eval_path, cfg)?;
            mb.input(&eval_path);
            let (csv_name, csv, recs) = match task {
                EvalTask::Grounding => {
                    let preds = grounding_predictions(&model, &vocab, &scenes)?;
                    let csv = grounding_csv(&preds, &class_counts(&scenes));
                    (GROUNDING_CSV, csv, preds.into_iter().map(Record::GroundingPrediction).collect::<Vec<_>>())
                }
                EvalTask::Captioning => {
                    let gts = densecap_ground_truth(&scenes)?;
                    let preds = densecap_predictions(&model, &vocab, &scenes, &gts)?;
                    let csv = captioning_csv(&preds, &gts)?;
                    let recs = preds
                        .into_iter()
                        .map(Record::DensecapPrediction)
                        .chain(gts.into_iter().map(Record::DensecapGt))
                        .collect();
                    (CAPTIONING_CSV, csv, recs)
                }
                EvalTask::Detection => {
                    let (dets, gts) = detections(&model, &vocab, &scenes)?;
                    let csv = detection_csv(&dets, &gts);
                    let recs = dets
                        .into_iter()
                        .map(Record::Detection)
                        .chain(gts.into_iter().map(Record::GtObject))
                        .collect();
                    (DETECTION_CSV, csv, recs)
                }
            };
            std::fs::create_dir_all(&ctx.out).map_err(io_err(&ctx.out))?;
            records::save(&ctx.out.join(PREDICTIONS_FILE), &header, &recs)?;
            mb.output(PREDICTIONS_FILE);
            (csv_name, csv)
        }
    };
    write_file(&ctx.out.join(csv_name), csv)?;
    mb.output(csv_name);
    if let Some(p) = &ctx.config_path {
        mb.input(p);
    }
    mb.write(ctx)
}

/// The five training setups of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPreset {
    A,
    B,
    C,
    D,
    E,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSetup {
    pub preset: AblationPreset,
    pub label: String,
    pub synthetic: bool,
    pub clean: bool,
    pub bidirectional: bool,
    pub seq2seq: bool,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Some(Self::A),
            "b" => Some(Self::B),
            "c" => Some(Self::C),
            "d" => Some(Self::D),
            "e" => Some(Self::E),
            _ => None,
        }
    }

    pub fn setup(self) -> AblationSetup {
        let (label, synthetic, clean, bidirectional, seq2seq) = match self {
            Self::A => ("(a) direct from scratch", false, true, true, true),
            Self::B => ("(b) joint from scratch", false, true, true, true),
            Self::C => ("(c) initial pre-trained", true, false, true, true),
            Self::D => ("(d) direct fine-tuned", true, true, true, true),
            Self::E => ("(e) joint fine-tuned", true, true, true, true),
        };
        AblationSetup {
            preset: self,
            label: label.to_string(),
            synthetic,
            clean,
            bidirectional,
            seq2seq,
        }
    }
}

fn copy_file(from: &Path, to: &Path) -> Result<(), RunError> {
    let bytes = read_file(from)?;
    write_file(to, bytes)
}

/// Runs one ablation preset end to end under `ctx.out`, leaving
/// `grounding_metrics.csv`, `captioning_metrics.csv` and `setup.json` there.
///
/// Single-objective presets (a) and (d) train one model per task; the
/// grounding metrics come from the grounding model and the captioning
/// metrics from the captioning model.
pub fn ablation(ctx: &RunContext, preset: AblationPreset, data: &Path) -> Result<RunManifest, RunError> {
    let mut mb = ManifestBuilder::new(format!("ablation {preset:?}").to_lowercase());
    let sub = |name: &str| ctx.with_out(ctx.out.join(name));
    let ckpt = |c: &RunContext| c.out.join(CHECKPOINT_DIR);
    let needs_pretrain = matches!(preset, AblationPreset::C | AblationPreset::D | AblationPreset::E);
    let pre = sub("pretrain");
    if needs_pretrain {
        train(&pre, Stage::Pretrain, data, None)?;
    }
    let init = needs_pretrain.then(|| ckpt(&pre));
    let (g_ckpt, c_ckpt) = match preset {
        AblationPreset::A | AblationPreset::D => {
            let g = sub("grounding");
            let c = sub("captioning");
            train(&g, Stage::FinetuneGrounding, data, init.as_deref())?;
            train(&c, Stage::FinetuneCaptioning, data, init.as_deref())?;
            (ckpt(&g), ckpt(&c))
        }
        AblationPreset::B | AblationPreset::E => {
            let j = sub("joint");
            train(&j, Stage::Joint, data, init.as_deref())?;
            (ckpt(&j), ckpt(&j))
        }
        AblationPreset::C => (ckpt(&pre), ckpt(&pre)),
    };
    let ge = sub("eval_grounding");
    eval(&ge, EvalTask::Grounding, data, &EvalSource::Checkpoint(g_ckpt))?;
    let ce = sub("eval_captioning");
    eval(&ce, EvalTask::Captioning, data, &EvalSource::Checkpoint(c_ckpt))?;
    copy_file(&ge.out.join(GROUNDING_CSV), &ctx.out.join(GROUNDING_CSV))?;
    copy_file(&ce.out.join(CAPTIONING_CSV), &ctx.out.join(CAPTIONING_CSV))?;
    let setup = serde_json::to_string_pretty(&preset.setup()).expect("setup serializes");
    write_file(&ctx.out.join(SETUP_FILE), setup + "\n")?;
    for f in [GROUNDING_CSV, CAPTIONING_CSV, SETUP_FILE] {
        mb.output(f);
    }
    mb.input(data);
    if let Some(p) = &ctx.config_path {
        mb.input(p);
    }
    mb.write(ctx)
}

pub const REPORT_HEADER: &str = "Training setup,Synthetic,ScanRefer,Bidirectional,Seq-to-Seq,Unique@0.5IoU,Multiple@0.5IoU,Overall@0.5IoU,CIDEr@0.5IoU,BLEU-4@0.5IoU,ROUGE-L@0.5IoU,METEOR@0.5IoU";

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, RunError> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| RunError::Input(format!("{} is not UTF-8", path.display())))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn find_value(rows: &[Vec<String>], key: &[&str], col: usize, path: &Path) -> Result<String, RunError> {
    rows.iter()
        .find(|r| key.iter().enumerate().all(|(i, k)| r.get(i).map(String::as_str) == Some(*k)))
        .and_then(|r| r.get(col).cloned())
        .ok_or_else(|| RunError::Input(format!("{} has no row {key:?}", path.display())))
}

/// Collates ablation run directories into one table, one row per run.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<String, RunError> {
    let mut table = format!("{REPORT_HEADER}\n");
    let mut mb = ManifestBuilder::new("report");
    for run in runs {
        let setup_path = run.join(SETUP_FILE);
        let setup: AblationSetup = serde_json::from_slice(&read_file(&setup_path)?)
            .map_err(|e| RunError::Input(format!("{}: {e}", setup_path.display())))?;
        let gpath = run.join(GROUNDING_CSV);
        let cpath = run.join(CAPTIONING_CSV);
        let g = csv_rows(&gpath)?;
        let c = csv_rows(&cpath)?;
        let mark = |b: bool| if b { "x" } else { "" };
        let mut cells = vec![
            setup.label.clone(),
            mark(setup.synthetic).into(),
            mark(setup.clean).into(),
            mark(setup.bidirectional).into(),
            mark(setup.seq2seq).into(),
        ];
        for col in 1..=3 {
            cells.push(find_value(&g, &["0.5"], col, &gpath)?);
        }
        for m in SentenceMetric::ALL {
            cells.push(find_value(&c, &[m.label(), "0.5"], 4, &cpath)?);
        }
        cells.push(find_value(&c, &["METEOR", "0.5"], 4, &cpath)?);
        table.push_str(&cells.join(","));
        table.push('\n');
        for p in [setup_path, gpath, cpath] {
            mb.input(&p);
        }
    }
    write_file(&out.join(REPORT_CSV), &table)?;
    mb.output(REPORT_CSV);
    let ctx = RunContext::new(RunConfig::default(), None, out);
    mb.write(&ctx)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_name_fields() {
        let err = RunConfig::from_toml_str("[model]\nn_heads = 3\n", "x").unwrap_err().to_string();
        assert!(err.contains("model.n_heads"), "{err}");
        let err = RunConfig::from_toml_str("[train]\nbatch_size = 0\n", "x").unwrap_err().to_string();
        assert!(err.contains("train.batch_size"), "{err}");
        let err = RunConfig::from_toml_str("[model]\nbogus = 1\n", "x").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let ok = RunConfig::from_toml_str("seed = 3\n[data]\nclean_train_scenes = 2\n", "x").unwrap();
        assert_eq!((ok.seed, ok.data.clean_train_scenes), (3, 2));
    }

    #[test]
    fn git_hash_matches_definition() {
        let mut h = Sha256::new();
        h.update(b"blob 3\0abc");
        let expected: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(git_style_hash(b"abc"), expected);
    }
}
