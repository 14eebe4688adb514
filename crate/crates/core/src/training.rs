//! Training data assembly, the two-pass loss graph, Adam, and stage runs.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Graph, ParamGroup, ParamStore, Var};
use crate::geometry::aabb_from_mask;
use crate::inference::{generate_from_features, ground_features, DecodeConfig};
use crate::losses::{compose_loss, grounding_target, LossBundle, Stage};
use crate::model::{InstanceFeatures, Model, ModelError};
use crate::synthpipe::{Scene, SynthPair};
use crate::tensor::Matrix;
use crate::textproc::{teacher_forcing_pair, TextError, TokenSeq, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage {stage} has no training data")]
    MissingDataset { stage: &'static str },
    #[error("stage {stage} expects {expected} data but got {found}")]
    WrongDataset {
        stage: &'static str,
        expected: &'static str,
        found: &'static str,
    },
    #[error("non-finite loss at step {step}: {bundle:?}")]
    NonFinite { step: usize, bundle: LossBundle },
    #[error("invalid train config: field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// Where a training set came from; pre-training consumes synthetic pairs,
/// every other stage consumes clean scene descriptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Clean,
}

impl DataKind {
    fn name(self) -> &'static str {
        match self {
            DataKind::Synthetic => "synthetic",
            DataKind::Clean => "clean",
        }
    }
}

/// One description of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Proposal index supervised by both tasks.
    pub target: usize,
    pub semantic_class: usize,
    /// `[CLS] words [SEP]`
    pub tokens: TokenSeq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainCloud {
    pub name: String,
    pub instances: InstanceFeatures<f64>,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub kind: DataKind,
    pub clouds: Vec<TrainCloud>,
}

fn make_example(
    instances: &InstanceFeatures<f64>,
    gt: &crate::geometry::Aabb,
    semantic_class: usize,
    text: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Option<Example>, TrainError> {
    let Some(target) = grounding_target(&instances.boxes, gt) else {
        return Ok(None);
    };
    Ok(Some(Example {
        target,
        semantic_class,
        tokens: vocab.encode(text, max_len)?,
    }))
}

impl TrainSet {
    /// Clean set: full scene clouds with their reference descriptions.
    pub fn from_scenes(
        model: &Model<f64>,
        scenes: &[Scene],
        vocab: &Vocabulary,
        descriptions_per_scene: Option<usize>,
    ) -> Result<Self, TrainError> {
        let max_len = model.config().max_len;
        let mut clouds = Vec::with_capacity(scenes.len());
        for scene in scenes {
            let instances = model.pool(&scene.cloud, &scene.masks())?;
            let mut examples = Vec::new();
            let limit = descriptions_per_scene.unwrap_or(usize::MAX);
            for d in scene.descriptions.iter().take(limit) {
                let Some(obj) = scene.object(d.target) else { continue };
                let gt = aabb_from_mask(&scene.cloud, &obj.mask).map_err(ModelError::from)?;
                if let Some(ex) = make_example(&instances, &gt, obj.semantic_class, &d.text, vocab, max_len)? {
                    examples.push(ex);
                }
            }
            if !examples.is_empty() {
                clouds.push(TrainCloud {
                    name: scene.scene_id.clone(),
                    instances,
                    examples,
                });
            }
        }
        Ok(Self {
            kind: DataKind::Clean,
            clouds,
        })
    }

    /// Synthetic set: one cropped cloud per emitted pair.
    pub fn from_pairs(model: &Model<f64>, pairs: &[SynthPair], vocab: &Vocabulary) -> Result<Self, TrainError> {
        let max_len = model.config().max_len;
        let mut clouds = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let instances = model.pool(&pair.cloud, &pair.masks)?;
            let gt = aabb_from_mask(&pair.cloud, &pair.masks[pair.target]).map_err(ModelError::from)?;
            if let Some(ex) = make_example(&instances, &gt, pair.semantic_class, &pair.caption, vocab, max_len)? {
                clouds.push(TrainCloud {
                    name: format!(
                        "{}/{}/{}",
                        pair.source.scene_id, pair.source.frame_index, pair.source.instance_id
                    ),
                    instances,
                    examples: vec![ex],
                });
            }
        }
        Ok(Self {
            kind: DataKind::Synthetic,
            clouds,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.clouds.iter().map(|c| c.examples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_examples() == 0
    }
}

/// Clouds and the example indices drawn from each for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<(usize, Vec<usize>)>,
}

impl Batch {
    /// Every example of every cloud.
    pub fn full(set: &TrainSet) -> Self {
        Self {
            items: set
                .clouds
                .iter()
                .enumerate()
                .map(|(i, c)| (i, (0..c.examples.len()).collect()))
                .collect(),
        }
    }

    pub fn n_sequences(&self) -> usize {
        self.items.iter().map(|(_, e)| e.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    /// Clouds per step.
    pub batch_size: usize,
    pub descriptions_per_cloud: usize,
    pub max_steps: usize,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Steps per plateau window; 0 disables the plateau stop.
    #[serde(default = "default_plateau_window")]
    pub plateau_window: usize,
    #[serde(default = "default_plateau_tol")]
    pub plateau_tol: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_plateau_window() -> usize {
    500
}
fn default_plateau_tol() -> f64 {
    1e-3
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            lr_backbone: 1e-4,
            lr_rest: 1e-5,
            batch_size: 8,
            descriptions_per_cloud: 16,
            max_steps: 1000,
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            plateau_window: default_plateau_window(),
            plateau_tol: default_plateau_tol(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, message: &str| {
            Err(TrainError::Config {
                field,
                message: message.into(),
            })
        };
        if !(self.lr_backbone >= 0.0 && self.lr_backbone.is_finite()) {
            return bad("lr_backbone", "must be a finite non-negative number");
        }
        if !(self.lr_rest >= 0.0 && self.lr_rest.is_finite()) {
            return bad("lr_rest", "must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.descriptions_per_cloud == 0 {
            return bad("descriptions_per_cloud", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        Ok(())
    }
}

/// Deterministic batch stream: clouds are visited in shuffled epochs.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn next_batch(&mut self, set: &TrainSet, batch_size: usize, per_cloud: usize) -> Batch {
        let n = set.clouds.len();
        let take = batch_size.min(n);
        let mut items = Vec::with_capacity(take);
        while items.len() < take {
            if self.cursor == self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let c = self.order[self.cursor];
            self.cursor += 1;
            if items.iter().any(|(i, _)| *i == c) {
                continue;
            }
            let mut ex: Vec<usize> = (0..set.clouds[c].examples.len()).collect();
            ex.shuffle(&mut self.rng);
            ex.truncate(per_cloud);
            ex.sort_unstable();
            items.push((c, ex));
        }
        Batch { items }
    }
}

/// Loss nodes of a stage graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub l_g: Option<Var>,
    pub l_cls: Option<Var>,
    pub l_c: Option<Var>,
    pub total: Var,
}

/// Builds the stage's loss on `graph`: box tokens are computed once per
/// cloud and shared by the grounding pass (global cue, bidirectional mask)
/// and the captioning pass (target cue, seq2seq mask).
pub fn build_losses(
    graph: &mut Graph<'_, f64>,
    model: &Model<f64>,
    set: &TrainSet,
    batch: &Batch,
    stage: Stage,
) -> Result<LossNodes, TrainError> {
    let mut g_terms = Vec::new();
    let mut cls_terms = Vec::new();
    let mut c_terms = Vec::new();
    for (cloud_idx, examples) in &batch.items {
        let cloud = &set.clouds[*cloud_idx];
        let inst = &cloud.instances;
        let box_tokens = model.box_tokens(graph, inst);
        for &e in examples {
            let ex = &cloud.examples[e];
            if stage.uses_grounding() {
                let real = vec![true; ex.tokens.len()];
                let out = model.grounding_pass(graph, inst, box_tokens, &ex.tokens.ids, &real);
                g_terms.push(graph.cross_entropy(out.logits, &[Some(ex.target)], Some(&inst.valid)));
                cls_terms.push(graph.cross_entropy(out.class_logits, &[Some(ex.semantic_class)], None));
            }
            if stage.uses_captioning() {
                let tf = teacher_forcing_pair(&ex.tokens)?;
                let real = vec![true; tf.input_ids.len()];
                let out = model.caption_pass(graph, inst, box_tokens, ex.target, &tf.input_ids, &real);
                let targets: Vec<Option<usize>> = tf.target_ids.iter().map(|&t| Some(t as usize)).collect();
                c_terms.push(graph.cross_entropy(out.logits, &targets, None));
            }
        }
    }
    let mut mean = |terms: &[Var]| -> Option<Var> {
        if terms.is_empty() {
            return None;
        }
        let s = graph.sum(terms);
        Some(graph.scale(s, 1.0 / terms.len() as f64))
    };
    let l_g = mean(&g_terms);
    let l_cls = mean(&cls_terms);
    let l_c = mean(&c_terms);
    let parts: Vec<Var> = [l_g, l_cls, l_c].into_iter().flatten().collect();
    if parts.is_empty() {
        return Err(TrainError::MissingDataset { stage: stage.name() });
    }
    let total = graph.sum(&parts);
    Ok(LossNodes { l_g, l_cls, l_c, total })
}

fn bundle(graph: &Graph<'_, f64>, nodes: &LossNodes, stage: Stage) -> LossBundle {
    let v = |n: Option<Var>| n.map_or(0.0, |n| graph.scalar(n));
    compose_loss(stage, v(nodes.l_g), v(nodes.l_cls), v(nodes.l_c))
}

/// Loss bundle and gradient of the stage total for one batch.
pub fn stage_gradients(
    model: &Model<f64>,
    set: &TrainSet,
    batch: &Batch,
    stage: Stage,
    dropout: Option<(f64, u64)>,
) -> Result<(LossBundle, Gradients<f64>), TrainError> {
    let mut graph = Graph::new(model.params());
    if let Some((rate, seed)) = dropout {
        graph = graph.with_dropout(rate, seed);
    }
    let nodes = build_losses(&mut graph, model, set, batch, stage)?;
    let b = bundle(&graph, &nodes, stage);
    let grads = graph.backward(nodes.total);
    Ok((b, grads))
}

/// Adam with separate learning rates for the backbone and the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix<f64>>,
    v: Vec<Matrix<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f64>, config: &TrainConfig) -> Self {
        let zeros: Vec<Matrix<f64>> = params
            .entries()
            .iter()
            .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
            .collect();
        Self {
            lr_backbone: config.lr_backbone,
            lr_rest: config.lr_rest,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut ParamStore<f64>, grads: &Gradients<f64>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, entry) in params.entries_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let lr = match entry.group {
                ParamGroup::Backbone => self.lr_backbone,
                ParamGroup::Rest => self.lr_rest,
            };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for (((p, &gi), mi), vi) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One optimisation step: a single graph holding both passes, one backward,
/// one update. Non-finite losses or gradients abort before the update.
pub fn train_step(
    model: &mut Model<f64>,
    optimizer: &mut Adam,
    set: &TrainSet,
    batch: &Batch,
    stage: Stage,
    step: usize,
    seed: u64,
) -> Result<LossBundle, TrainError> {
    let rate = model.config().dropout;
    let dropout = (rate > 0.0).then(|| (rate, crate::synthpipe::derive_seed(&[seed, step as u64])));
    let (b, grads) = stage_gradients(model, set, batch, stage, dropout)?;
    if !b.is_finite() || !grads.is_finite() {
        return Err(TrainError::NonFinite { step, bundle: b });
    }
    optimizer.update(model.params_mut(), &grads);
    Ok(b)
}

/// Joint-stage step: grounding and captioning losses from one batch.
pub fn joint_step(
    model: &mut Model<f64>,
    optimizer: &mut Adam,
    set: &TrainSet,
    batch: &Batch,
) -> Result<LossBundle, TrainError> {
    train_step(model, optimizer, set, batch, Stage::Joint, optimizer.steps() as usize, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub bundle: LossBundle,
}

pub const LOSS_CSV_HEADER: &str = "step,l_g,l_cls,l_c,total";

pub fn loss_csv(curve: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in curve {
        let b = &r.bundle;
        out.push_str(&format!("{},{},{},{},{}\n", r.step, b.l_g, b.l_cls, b.l_c, b.total));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Plateau,
    Callback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub curve: Vec<LossRecord>,
    pub steps: usize,
    pub stop: StopReason,
}

/// True when the mean total loss of the last `window` steps improved on the
/// window before it by less than `tol`, relatively.
pub fn plateaued(curve: &[LossRecord], window: usize, tol: f64) -> bool {
    if window == 0 || curve.len() < 2 * window || !curve.len().is_multiple_of(window) {
        return false;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.bundle.total).sum::<f64>() / s.len() as f64;
    let n = curve.len();
    let prev = mean(&curve[n - 2 * window..n - window]);
    let cur = mean(&curve[n - window..]);
    if prev <= 0.0 {
        return true;
    }
    (prev - cur) / prev < tol
}

/// Runs one stage. `on_step` sees the step number (1-based) and the updated
/// model after each step and may stop the run early.
pub fn run_stage(
    model: &mut Model<f64>,
    config: &TrainConfig,
    set: &TrainSet,
    mut on_step: impl FnMut(usize, &Model<f64>) -> ControlFlow<()>,
) -> Result<StageOutcome, TrainError> {
    config.validate()?;
    if set.is_empty() {
        return Err(TrainError::MissingDataset {
            stage: config.stage.name(),
        });
    }
    let expected = if config.stage == Stage::Pretrain { DataKind::Synthetic } else { DataKind::Clean };
    if set.kind != expected {
        return Err(TrainError::WrongDataset {
            stage: config.stage.name(),
            expected: expected.name(),
            found: set.kind.name(),
        });
    }
    let mut optimizer = Adam::new(model.params(), config);
    let mut sampler = BatchSampler::new(config.seed);
    let mut curve = Vec::with_capacity(config.max_steps);
    let mut stop = StopReason::MaxSteps;
    for step in 1..=config.max_steps {
        let batch = sampler.next_batch(set, config.batch_size, config.descriptions_per_cloud);
        let bundle = train_step(model, &mut optimizer, set, &batch, config.stage, step, config.seed)?;
        curve.push(LossRecord { step, bundle });
        if on_step(step, model).is_break() {
            stop = StopReason::Callback;
            break;
        }
        if plateaued(&curve, config.plateau_window, config.plateau_tol) {
            stop = StopReason::Plateau;
            break;
        }
    }
    Ok(StageOutcome {
        steps: curve.len(),
        curve,
        stop,
    })
}

/// Training-set grounding accuracy and exact caption regeneration rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub grounding_accuracy: f64,
    pub caption_exact: f64,
}

pub fn fit_report(model: &Model<f64>, set: &TrainSet) -> Result<FitReport, TrainError> {
    let decode = DecodeConfig {
        max_len: model.config().max_len,
    };
    let (mut hits, mut exact, mut n) = (0usize, 0usize, 0usize);
    for cloud in &set.clouds {
        for ex in &cloud.examples {
            n += 1;
            if ground_features(model, &cloud.instances, &ex.tokens)?.index == ex.target {
                hits += 1;
            }
            if generate_from_features(model, &cloud.instances, ex.target, &decode)? == ex.tokens {
                exact += 1;
            }
        }
    }
    let n = n.max(1) as f64;
    Ok(FitReport {
        grounding_accuracy: hits as f64 / n,
        caption_exact: exact as f64 / n,
    })
}
