//! The unified box/text transformer: instance encoder, causal text encoder
//! with an additive visual cue, masked multimodal fusion, and the grounding,
//! captioning and language-classification heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamGroup, ParamStore, Var};
use crate::geometry::{aabb_from_mask, Aabb, GeometryError, InstanceMask, PointCloud};
use crate::tensor::{masked_softmax, Matrix, Scalar};
use crate::textproc::{TokenSeq, PAD};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no proposals")]
    NoProposals,
    #[error("invalid model config: field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("point features have width {found}, model expects {expected}")]
    FeatureWidth { expected: usize, found: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Which [CLS] encoding feeds the language classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClsSource {
    /// Text-encoder output at position 0.
    PreFusion,
    /// Fused text token at position 0 of the grounding (bidirectional) pass.
    #[default]
    PostFusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_fusion_layers: usize,
    pub n_text_layers: usize,
    /// Feed-forward width inside every transformer layer.
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_boxes: usize,
    pub max_len: usize,
    pub n_semantic_classes: usize,
    /// Per-point feature width, `3 + K`.
    pub point_feature_dim: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub cls_source: ClsSource,
}

impl ModelConfig {
    /// The gradient-check configuration.
    pub fn tiny(vocab_size: usize, n_semantic_classes: usize, point_feature_dim: usize) -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            n_fusion_layers: 1,
            n_text_layers: 1,
            ffn_dim: 16,
            vocab_size,
            max_boxes: 16,
            max_len: 16,
            n_semantic_classes,
            point_feature_dim,
            dropout: 0.0,
            cls_source: ClsSource::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_fusion_layers", self.n_fusion_layers),
            ("n_text_layers", self.n_text_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_boxes", self.max_boxes),
            ("n_semantic_classes", self.n_semantic_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ModelError::Config {
                    field,
                    message: "must be at least 1".into(),
                });
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config {
                field: "n_heads",
                message: format!("must divide d_model ({})", self.d_model),
            });
        }
        if self.max_len < 2 {
            return Err(ModelError::Config {
                field: "max_len",
                message: "must be at least 2".into(),
            });
        }
        if self.point_feature_dim < 3 {
            return Err(ModelError::Config {
                field: "point_feature_dim",
                message: "must be at least 3 (xyz)".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config {
                field: "dropout",
                message: "must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Pooled per-instance features and boxes, the fixed input to the box-token encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFeatures<T> {
    /// `M x 2F`: mean then max of each instance's point features.
    pub pooled: Matrix<T>,
    pub boxes: Vec<Aabb>,
    pub instance_ids: Vec<u32>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> InstanceFeatures<T> {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> InstanceFeatures<U> {
        InstanceFeatures {
            pooled: self.pooled.cast(),
            boxes: self.boxes.clone(),
            instance_ids: self.instance_ids.clone(),
            valid: self.valid.clone(),
        }
    }

    /// Reorders instances so that new position `i` holds old instance `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let rows: Vec<Vec<T>> = order.iter().map(|&i| self.pooled.row(i).to_vec()).collect();
        Self {
            pooled: Matrix::from_rows(&rows),
            boxes: order.iter().map(|&i| self.boxes[i]).collect(),
            instance_ids: order.iter().map(|&i| self.instance_ids[i]).collect(),
            valid: order.iter().map(|&i| self.valid[i]).collect(),
        }
    }
}

/// Mean and max pooling of each mask's point features (xyz then aux), at most
/// `max_boxes` masks in the given order.
pub fn pool_instances<T: Scalar>(
    cloud: &PointCloud,
    masks: &[InstanceMask],
    max_boxes: usize,
) -> Result<InstanceFeatures<T>, ModelError> {
    if masks.is_empty() {
        return Err(ModelError::NoProposals);
    }
    let masks = &masks[..masks.len().min(max_boxes)];
    let f = cloud.feature_dim();
    let mut pooled = Matrix::zeros(masks.len(), 2 * f);
    let mut boxes = Vec::with_capacity(masks.len());
    for (row, mask) in masks.iter().enumerate() {
        mask.validate(cloud)?;
        boxes.push(aabb_from_mask(cloud, mask)?);
        let mut sum = vec![0.0f64; f];
        let mut max = vec![f64::NEG_INFINITY; f];
        for &i in &mask.point_indices {
            let xyz = cloud.xyz(i);
            for (k, v) in xyz.iter().chain(cloud.aux(i)).enumerate() {
                sum[k] += v;
                max[k] = max[k].max(*v);
            }
        }
        let n = mask.len() as f64;
        let out = pooled.row_mut(row);
        for k in 0..f {
            out[k] = T::lit(sum[k] / n);
            out[f + k] = T::lit(max[k]);
        }
    }
    Ok(InstanceFeatures {
        pooled,
        boxes,
        instance_ids: masks.iter().map(|m| m.instance_id).collect(),
        valid: vec![true; masks.len()],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Bidirectional,
    Seq2Seq,
}

/// Which of the `M + L` positions each position may attend to. Boxes come first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub mode: MaskMode,
    pub n_box: usize,
    pub n_text: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.n_box + self.n_text
    }

    pub fn allowed(&self, from: usize, to: usize) -> bool {
        self.allowed[from * self.size() + to]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Fusion mask over `box_valid.len()` boxes followed by `text_real.len()` text tokens.
///
/// Bidirectional: every position sees every non-pad position. Seq2seq: boxes
/// see boxes only, text sees all boxes and text at or before itself.
pub fn build_mask(mode: MaskMode, box_valid: &[bool], text_real: &[bool]) -> AttentionMask {
    let (m, l) = (box_valid.len(), text_real.len());
    let n = m + l;
    let real = |j: usize| if j < m { box_valid[j] } else { text_real[j - m] };
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let rule = match mode {
                MaskMode::Bidirectional => true,
                MaskMode::Seq2Seq => match (i < m, j < m) {
                    (true, true) => true,
                    (true, false) => false,
                    (false, true) => true,
                    (false, false) => j <= i,
                },
            };
            allowed[i * n + j] = rule && real(j);
        }
    }
    AttentionMask {
        mode,
        n_box: m,
        n_text: l,
        allowed,
    }
}

fn causal_mask(real: &[bool]) -> Vec<bool> {
    let l = real.len();
    let mut allowed = vec![false; l * l];
    for i in 0..l {
        for j in 0..=i {
            allowed[i * l + j] = real[j];
        }
    }
    allowed
}

/// Graph nodes produced by the grounding (bidirectional) pass.
#[derive(Debug, Clone, Copy)]
pub struct GroundingNodes {
    pub box_tokens: Var,
    pub text_tokens: Var,
    pub fused_box: Var,
    pub fused_text: Var,
    /// `1 x M`
    pub logits: Var,
    /// `1 x n_semantic_classes`
    pub class_logits: Var,
}

/// Graph nodes produced by the captioning (seq2seq) pass.
#[derive(Debug, Clone, Copy)]
pub struct CaptionNodes {
    pub text_tokens: Var,
    pub fused_box: Var,
    pub fused_text: Var,
    /// `L x vocab_size`; row `i` scores the word after position `i`.
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl Model<f64> {
    /// Fresh model with Xavier-uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let f2 = 2 * config.point_feature_dim;
        {
            let mut add_linear = |p: &mut ParamStore<f64>, name: &str, group, fan_in: usize, fan_out: usize, bias: bool| {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
                p.insert(format!("{name}.weight"), group, Matrix::from_vec(fan_in, fan_out, w));
                if bias {
                    p.insert(format!("{name}.bias"), group, Matrix::zeros(1, fan_out));
                }
            };
            add_linear(&mut params, "instance.fc1", ParamGroup::Backbone, f2, d, true);
            add_linear(&mut params, "instance.fc2", ParamGroup::Backbone, d, d, true);
            let mut layers = vec![];
            layers.extend((0..config.n_text_layers).map(|i| format!("text.layer{i}")));
            layers.extend((0..config.n_fusion_layers).map(|i| format!("fusion.layer{i}")));
            for prefix in &layers {
                for proj in ["q", "k", "v", "o"] {
                    add_linear(&mut params, &format!("{prefix}.attn.{proj}"), ParamGroup::Rest, d, d, true);
                }
                add_linear(&mut params, &format!("{prefix}.ffn.fc1"), ParamGroup::Rest, d, config.ffn_dim, true);
                add_linear(&mut params, &format!("{prefix}.ffn.fc2"), ParamGroup::Rest, config.ffn_dim, d, true);
                for ln in ["ln1", "ln2"] {
                    params.insert(format!("{prefix}.{ln}.gamma"), ParamGroup::Rest, Matrix::filled(1, d, 1.0));
                    params.insert(format!("{prefix}.{ln}.beta"), ParamGroup::Rest, Matrix::zeros(1, d));
                }
            }
            add_linear(&mut params, "grounding_head", ParamGroup::Rest, d, 1, false);
            add_linear(&mut params, "caption_head", ParamGroup::Rest, d, config.vocab_size, true);
            add_linear(&mut params, "lang_cls.fc1", ParamGroup::Rest, d, d, true);
            add_linear(&mut params, "lang_cls.fc2", ParamGroup::Rest, d, config.n_semantic_classes, true);
        }
        let mut embed = |rows: usize| Matrix::from_vec(rows, d, (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let word = embed(config.vocab_size);
        let pos = embed(config.max_len);
        params.insert("text.word_emb", ParamGroup::Rest, word);
        params.insert("text.pos_emb", ParamGroup::Rest, pos);
        // grounding head is stored as a 1 x d row so logits = w . h_i
        let id = params.id("grounding_head.weight").unwrap();
        let w = params.entries()[id].value.transpose();
        params.entries_mut()[id].value = w;
        Ok(Self { config, params })
    }
}

impl<T: Scalar> Model<T> {
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn pool(&self, cloud: &PointCloud, masks: &[InstanceMask]) -> Result<InstanceFeatures<T>, ModelError> {
        if cloud.feature_dim() != self.config.point_feature_dim {
            return Err(ModelError::FeatureWidth {
                expected: self.config.point_feature_dim,
                found: cloud.feature_dim(),
            });
        }
        pool_instances(cloud, masks, self.config.max_boxes)
    }

    fn check_text(&self, ids: &[u32], real: &[bool]) -> Result<(), ModelError> {
        if ids.len() != real.len() {
            return Err(ModelError::Dimension(format!("{} ids but {} pad flags", ids.len(), real.len())));
        }
        if ids.is_empty() {
            return Err(ModelError::Dimension("empty text".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_instances(&self, inst: &InstanceFeatures<T>) -> Result<(), ModelError> {
        if inst.is_empty() || !inst.valid.iter().any(|&v| v) {
            return Err(ModelError::NoProposals);
        }
        let expected = 2 * self.config.point_feature_dim;
        if inst.pooled.cols() != expected || inst.pooled.rows() != inst.len() || inst.valid.len() != inst.len() {
            return Err(ModelError::Dimension(format!(
                "pooled features {:?} for {} instances, expected width {expected}",
                inst.pooled.shape(),
                inst.len()
            )));
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph<'_, T>, name: &str, x: Var) -> Var {
        let w = g.param(&format!("{name}.weight"));
        let b = g.param(&format!("{name}.bias"));
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }

    /// Box tokens `M x d`: two-layer perceptron over pooled instance features.
    pub fn box_tokens(&self, g: &mut Graph<'_, T>, inst: &InstanceFeatures<T>) -> Var {
        let x = g.constant(inst.pooled.clone());
        let h = self.linear(g, "instance.fc1", x);
        let h = g.gelu(h);
        self.linear(g, "instance.fc2", h)
    }

    /// `1 x d` mean over valid box tokens.
    pub fn global_box_token(&self, g: &mut Graph<'_, T>, box_tokens: Var, valid: &[bool]) -> Var {
        let rows: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
        g.mean_rows(box_tokens, &rows)
    }

    fn attention_layer(&self, g: &mut Graph<'_, T>, prefix: &str, x: Var, allowed: &[bool]) -> Var {
        let q = self.linear(g, &format!("{prefix}.attn.q"), x);
        let k = self.linear(g, &format!("{prefix}.attn.k"), x);
        let v = self.linear(g, &format!("{prefix}.attn.v"), x);
        let dh = self.config.head_dim();
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.masked_softmax(scores, allowed);
            heads.push(g.matmul(weights, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let attn = self.linear(g, &format!("{prefix}.attn.o"), merged);
        let attn = g.dropout(attn);
        let x = g.add(x, attn);
        let (g1, b1) = (g.param(&format!("{prefix}.ln1.gamma")), g.param(&format!("{prefix}.ln1.beta")));
        let x = g.layer_norm(x, g1, b1);
        let h = self.linear(g, &format!("{prefix}.ffn.fc1"), x);
        let h = g.gelu(h);
        let h = self.linear(g, &format!("{prefix}.ffn.fc2"), h);
        let h = g.dropout(h);
        let x = g.add(x, h);
        let (g2, b2) = (g.param(&format!("{prefix}.ln2.gamma")), g.param(&format!("{prefix}.ln2.beta")));
        g.layer_norm(x, g2, b2)
    }

    /// Text tokens `L x d`: word + position embedding, plus the visual cue on
    /// every position, then causal self-attention layers.
    pub fn text_tokens(&self, g: &mut Graph<'_, T>, ids: &[u32], real: &[bool], visual_cue: Var) -> Var {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = g.param("text.word_emb");
        let words = g.gather(table, &ids);
        let pos_table = g.param("text.pos_emb");
        let pos = g.slice_rows(pos_table, 0, ids.len());
        let x = g.add(words, pos);
        let mut x = g.add_row(x, visual_cue);
        let allowed = causal_mask(real);
        for i in 0..self.config.n_text_layers {
            x = self.attention_layer(g, &format!("text.layer{i}"), x, &allowed);
        }
        x
    }

    /// Runs the fusion layers over `[boxes; text]` and splits the result back.
    pub fn fuse(&self, g: &mut Graph<'_, T>, boxes: Var, text: Var, mask: &AttentionMask) -> (Var, Var) {
        let (m, l) = (g.value(boxes).rows(), g.value(text).rows());
        assert_eq!((m, l), (mask.n_box, mask.n_text), "mask does not match token counts");
        let mut x = g.concat_rows(&[boxes, text]);
        for i in 0..self.config.n_fusion_layers {
            x = self.attention_layer(g, &format!("fusion.layer{i}"), x, mask.as_slice());
        }
        (g.slice_rows(x, 0, m), g.slice_rows(x, m, l))
    }

    /// `1 x M` grounding logits (bias-free linear map per fused box token).
    pub fn grounding_logits(&self, g: &mut Graph<'_, T>, fused_box: Var) -> Var {
        let w = g.param("grounding_head.weight");
        g.matmul_nt(w, fused_box)
    }

    pub fn caption_logits(&self, g: &mut Graph<'_, T>, fused_text: Var) -> Var {
        self.linear(g, "caption_head", fused_text)
    }

    pub fn class_logits(&self, g: &mut Graph<'_, T>, cls: Var) -> Var {
        let h = self.linear(g, "lang_cls.fc1", cls);
        let h = g.gelu(h);
        self.linear(g, "lang_cls.fc2", h)
    }

    /// Grounding pass: global box token as cue, bidirectional fusion.
    pub fn grounding_pass(
        &self,
        g: &mut Graph<'_, T>,
        inst: &InstanceFeatures<T>,
        box_tokens: Var,
        ids: &[u32],
        real: &[bool],
    ) -> GroundingNodes {
        let cue = self.global_box_token(g, box_tokens, &inst.valid);
        let text_tokens = self.text_tokens(g, ids, real, cue);
        let mask = build_mask(MaskMode::Bidirectional, &inst.valid, real);
        let (fused_box, fused_text) = self.fuse(g, box_tokens, text_tokens, &mask);
        let logits = self.grounding_logits(g, fused_box);
        let cls_source = match self.config.cls_source {
            ClsSource::PreFusion => text_tokens,
            ClsSource::PostFusion => fused_text,
        };
        let cls = g.slice_rows(cls_source, 0, 1);
        let class_logits = self.class_logits(g, cls);
        GroundingNodes {
            box_tokens,
            text_tokens,
            fused_box,
            fused_text,
            logits,
            class_logits,
        }
    }

    /// Captioning pass: the target's box token as cue, seq2seq fusion.
    pub fn caption_pass(
        &self,
        g: &mut Graph<'_, T>,
        inst: &InstanceFeatures<T>,
        box_tokens: Var,
        target: usize,
        ids: &[u32],
        real: &[bool],
    ) -> CaptionNodes {
        let cue = g.slice_rows(box_tokens, target, 1);
        let text_tokens = self.text_tokens(g, ids, real, cue);
        let mask = build_mask(MaskMode::Seq2Seq, &inst.valid, real);
        let (fused_box, fused_text) = self.fuse(g, box_tokens, text_tokens, &mask);
        let logits = self.caption_logits(g, fused_text);
        CaptionNodes {
            text_tokens,
            fused_box,
            fused_text,
            logits,
        }
    }

    // Graph-free conveniences used by inference and tests.

    pub fn encode_instances(&self, cloud: &PointCloud, masks: &[InstanceMask]) -> Result<BoxTokenSeq<T>, ModelError> {
        let inst = self.pool(cloud, masks)?;
        self.box_token_seq(&inst)
    }

    pub fn box_token_seq(&self, inst: &InstanceFeatures<T>) -> Result<BoxTokenSeq<T>, ModelError> {
        self.check_instances(inst)?;
        let mut g = Graph::new(&self.params);
        let tokens = self.box_tokens(&mut g, inst);
        Ok(BoxTokenSeq {
            tokens: g.value(tokens).clone(),
            boxes: inst.boxes.clone(),
            valid: inst.valid.clone(),
        })
    }

    /// Text encoding of `seq` (all positions real) with `visual_cue` added.
    pub fn encode_text(&self, seq: &TokenSeq, visual_cue: &[T]) -> Result<Matrix<T>, ModelError> {
        let real: Vec<bool> = seq.ids.iter().map(|&id| id != PAD).collect();
        self.check_text(&seq.ids, &real)?;
        if visual_cue.len() != self.config.d_model {
            return Err(ModelError::Dimension(format!("visual cue of width {}", visual_cue.len())));
        }
        let mut g = Graph::new(&self.params);
        let cue = g.constant(Matrix::row_vector(visual_cue.to_vec()));
        let out = self.text_tokens(&mut g, &seq.ids, &real, cue);
        Ok(g.value(out).clone())
    }

    /// Fusion over explicit token matrices.
    pub fn fuse_tokens(
        &self,
        boxes: &Matrix<T>,
        text: &Matrix<T>,
        mask: &AttentionMask,
    ) -> Result<(Matrix<T>, Matrix<T>), ModelError> {
        let d = self.config.d_model;
        if boxes.cols() != d || text.cols() != d {
            return Err(ModelError::Dimension(format!("token width must be {d}")));
        }
        if mask.n_box != boxes.rows() || mask.n_text != text.rows() {
            return Err(ModelError::Dimension(format!(
                "mask is {}+{} but inputs are {}+{}",
                mask.n_box,
                mask.n_text,
                boxes.rows(),
                text.rows()
            )));
        }
        let mut g = Graph::new(&self.params);
        let b = g.constant(boxes.clone());
        let t = g.constant(text.clone());
        let (fb, ft) = self.fuse(&mut g, b, t, mask);
        Ok((g.value(fb).clone(), g.value(ft).clone()))
    }

    /// Grounding probabilities over valid proposals (invalid ones get 0).
    pub fn grounding_head(&self, fused_box: &Matrix<T>, valid: &[bool]) -> Vec<T> {
        let mut g = Graph::new(&self.params);
        let fb = g.constant(fused_box.clone());
        let logits = self.grounding_logits(&mut g, fb);
        masked_softmax(g.value(logits).row(0), |i| valid[i])
    }

    pub fn caption_head(&self, fused_text: &Matrix<T>) -> Matrix<T> {
        let mut g = Graph::new(&self.params);
        let ft = g.constant(fused_text.clone());
        let logits = self.caption_logits(&mut g, ft);
        g.value(logits).clone()
    }

    pub fn lang_class_head(&self, cls: &[T]) -> Vec<T> {
        let mut g = Graph::new(&self.params);
        let c = g.constant(Matrix::row_vector(cls.to_vec()));
        let logits = self.class_logits(&mut g, c);
        g.value(logits).row(0).to_vec()
    }

    /// Full grounding forward: (proposal probabilities, class logits).
    pub fn ground(&self, inst: &InstanceFeatures<T>, query: &TokenSeq) -> Result<(Vec<T>, Vec<T>), ModelError> {
        self.check_instances(inst)?;
        let real: Vec<bool> = query.ids.iter().map(|&id| id != PAD).collect();
        self.check_text(&query.ids, &real)?;
        let mut g = Graph::new(&self.params);
        let bt = self.box_tokens(&mut g, inst);
        let out = self.grounding_pass(&mut g, inst, bt, &query.ids, &real);
        let probs = masked_softmax(g.value(out.logits).row(0), |i| inst.valid[i]);
        Ok((probs, g.value(out.class_logits).row(0).to_vec()))
    }

    /// Full captioning forward on an input prefix: `L x vocab` next-word logits.
    pub fn caption_forward(
        &self,
        inst: &InstanceFeatures<T>,
        target: usize,
        ids: &[u32],
    ) -> Result<CaptionOutputs<T>, ModelError> {
        self.check_instances(inst)?;
        if target >= inst.len() {
            return Err(ModelError::Dimension(format!("target {target} of {} proposals", inst.len())));
        }
        let real: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
        self.check_text(ids, &real)?;
        let mut g = Graph::new(&self.params);
        let bt = self.box_tokens(&mut g, inst);
        let out = self.caption_pass(&mut g, inst, bt, target, ids, &real);
        Ok(CaptionOutputs {
            logits: g.value(out.logits).clone(),
            fused_box: g.value(out.fused_box).clone(),
            fused_text: g.value(out.fused_text).clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionOutputs<T> {
    pub logits: Matrix<T>,
    pub fused_box: Matrix<T>,
    pub fused_text: Matrix<T>,
}

/// Box tokens with their boxes and validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxTokenSeq<T> {
    pub tokens: Matrix<T>,
    pub boxes: Vec<Aabb>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> BoxTokenSeq<T> {
    /// Arithmetic mean over valid tokens.
    pub fn global_token(&self) -> Vec<T> {
        let rows: Vec<usize> = (0..self.valid.len()).filter(|&i| self.valid[i]).collect();
        let mut out = vec![T::zero(); self.tokens.cols()];
        for &r in &rows {
            for (o, &v) in out.iter_mut().zip(self.tokens.row(r)) {
                *o = *o + v;
            }
        }
        let n = T::from_usize(rows.len().max(1)).unwrap();
        out.into_iter().map(|v| v / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::{CLS, SEP};

    fn cloud_and_masks(constant: bool) -> (PointCloud, Vec<InstanceMask>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cloud = PointCloud::empty(2);
        for i in 0..30 {
            let base = (i / 10) as f64 * 3.0;
            let p = [base + rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let aux = if constant { [0.5, 0.5] } else { [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)] };
            cloud.push(if constant { [0.25; 3] } else { p }, &aux);
        }
        let masks = (0..3).map(|k| InstanceMask::new(k as u32, k, (k * 10..k * 10 + 10).collect())).collect();
        (cloud, masks)
    }

    fn model() -> Model<f64> {
        Model::new(ModelConfig::tiny(12, 4, 5), 1).unwrap()
    }

    #[test]
    fn encode_instances_shape_and_errors() {
        let m = model();
        let (cloud, masks) = cloud_and_masks(false);
        let bts = m.encode_instances(&cloud, &masks).unwrap();
        assert_eq!(bts.tokens.shape(), (3, 8));
        assert_eq!(bts.boxes.len(), 3);
        assert!(matches!(m.encode_instances(&cloud, &[]), Err(ModelError::NoProposals)));
        assert_eq!(m.encode_instances(&cloud, &[]).unwrap_err().to_string(), "no proposals");
    }

    #[test]
    fn permuting_masks_permutes_tokens() {
        let m = model();
        let (cloud, masks) = cloud_and_masks(false);
        let a = m.encode_instances(&cloud, &masks).unwrap();
        let rev: Vec<_> = masks.iter().rev().cloned().collect();
        let b = m.encode_instances(&cloud, &rev).unwrap();
        for i in 0..3 {
            assert_eq!(a.tokens.row(i), b.tokens.row(2 - i));
        }
    }

    #[test]
    fn constant_features_give_identical_tokens() {
        let m = model();
        let (cloud, masks) = cloud_and_masks(true);
        let inst = m.pool(&cloud, &masks).unwrap();
        // closed form: mean = max = the constant feature row
        for r in 0..3 {
            assert_eq!(inst.pooled.row(r), &[0.25, 0.25, 0.25, 0.5, 0.5, 0.25, 0.25, 0.25, 0.5, 0.5]);
        }
        let bts = m.box_token_seq(&inst).unwrap();
        assert_eq!(bts.tokens.row(0), bts.tokens.row(1));
        assert_eq!(bts.tokens.row(1), bts.tokens.row(2));
    }

    #[test]
    fn global_token_is_the_mean() {
        let e1 = |s: f64| {
            let mut v = vec![0.0; 4];
            v[0] = s;
            v
        };
        let seq = BoxTokenSeq {
            tokens: Matrix::from_rows(&[e1(1.0), e1(3.0)]),
            boxes: vec![],
            valid: vec![true, true],
        };
        assert_eq!(seq.global_token(), e1(2.0));
        let same = BoxTokenSeq {
            tokens: Matrix::from_rows(&vec![vec![0.5, -1.0]; 3]),
            boxes: vec![],
            valid: vec![true; 3],
        };
        assert_eq!(same.global_token(), vec![0.5, -1.0]);
        let swapped = BoxTokenSeq {
            tokens: Matrix::from_rows(&[e1(3.0), e1(1.0)]),
            ..seq.clone()
        };
        assert_eq!(swapped.global_token(), seq.global_token());
    }

    #[test]
    fn zero_cue_and_causal_text_encoding() {
        let m = model();
        let seq = TokenSeq::new(vec![CLS, 5, 6, 7, SEP]);
        let zero = m.encode_text(&seq, &[0.0; 8]).unwrap();
        assert_eq!(zero.shape(), (5, 8));
        let mut g = Graph::new(m.params());
        let cue = g.constant(Matrix::zeros(1, 8));
        let plain = m.text_tokens(&mut g, &seq.ids, &[true; 5], cue);
        assert_eq!(g.value(plain), &zero);
        let cue = [0.3; 8];
        let base = m.encode_text(&seq, &cue).unwrap();
        for j in 1..5 {
            let mut ids = seq.ids.clone();
            ids[j] = 9;
            let perturbed = m.encode_text(&TokenSeq::new(ids), &cue).unwrap();
            for i in 0..j {
                for c in 0..8 {
                    assert!((base.get(i, c) - perturbed.get(i, c)).abs() <= 1e-12);
                }
            }
            assert_ne!(base.row(j), perturbed.row(j));
        }
    }

    #[test]
    fn mask_examples() {
        let full = build_mask(MaskMode::Bidirectional, &[true; 2], &[true; 3]);
        assert!(full.as_slice().iter().all(|&a| a));
        let s = build_mask(MaskMode::Seq2Seq, &[true; 2], &[true; 3]);
        // cellwise enumeration of the rule, M = 2, L = 3
        let expected = [
            [1, 1, 0, 0, 0],
            [1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 1, 1, 0],
            [1, 1, 1, 1, 1],
        ];
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(s.allowed(i, j), expected[i][j] == 1, "cell ({i},{j})");
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(!s.allowed(2 + i, 2 + j));
            }
        }
        let padded = build_mask(MaskMode::Bidirectional, &[true, true], &[true, true, false]);
        assert!((0..5).all(|i| !padded.allowed(i, 4)));
        let padded = build_mask(MaskMode::Seq2Seq, &[true, false], &[true, true, false]);
        assert!((0..5).all(|i| !padded.allowed(i, 1) && !padded.allowed(i, 4)));
    }

    #[test]
    fn fusion_shapes_and_seq2seq_isolation() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rand_mat = |rng: &mut ChaCha8Rng, r: usize| Matrix::from_vec(r, 8, (0..r * 8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let boxes = rand_mat(&mut rng, 3);
        let text = rand_mat(&mut rng, 4);
        let s2s = build_mask(MaskMode::Seq2Seq, &[true; 3], &[true; 4]);
        let (fb, ft) = m.fuse_tokens(&boxes, &text, &s2s).unwrap();
        assert_eq!((fb.rows(), ft.rows()), (3, 4));
        let bi = build_mask(MaskMode::Bidirectional, &[true; 3], &[true; 4]);
        let (bb, bt) = m.fuse_tokens(&boxes, &text, &bi).unwrap();
        for j in 0..4 {
            let mut t2 = text.clone();
            t2.row_mut(j)[0] += 0.5;
            let (fb2, _) = m.fuse_tokens(&boxes, &t2, &s2s).unwrap();
            assert_eq!(fb2, fb);
            let (bb2, bt2) = m.fuse_tokens(&boxes, &t2, &bi).unwrap();
            for i in 0..3 {
                assert_ne!(bb2.row(i), bb.row(i));
            }
            for i in 0..4 {
                assert_ne!(bt2.row(i), bt.row(i));
            }
        }
        assert!(m.fuse_tokens(&boxes, &text, &build_mask(MaskMode::Seq2Seq, &[true; 2], &[true; 4])).is_err());
    }

    #[test]
    fn grounding_head_properties() {
        let m = model();
        let same = Matrix::from_rows(&vec![vec![0.2; 8]; 4]);
        let p = m.grounding_head(&same, &[true; 4]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fused = Matrix::from_vec(5, 8, (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let p = m.grounding_head(&fused, &[true, true, false, true, true]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
        let shift: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut shifted = fused.clone();
        for r in 0..5 {
            for (v, s) in shifted.row_mut(r).iter_mut().zip(&shift) {
                *v += s;
            }
        }
        let q = m.grounding_head(&shifted, &[true, true, false, true, true]);
        assert_eq!(crate::tensor::argmax(&p), crate::tensor::argmax(&q));
    }

    #[test]
    fn caption_and_class_head_shapes() {
        let m = model();
        let fused = Matrix::from_rows(&[vec![0.1; 8], vec![-0.3; 8], vec![0.7; 8]]);
        let logits = m.caption_head(&fused);
        assert_eq!(logits.shape(), (3, 12));
        for r in 0..3 {
            let p = masked_softmax(logits.row(r), |_| true);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let c = m.lang_class_head(&[0.5; 8]);
        assert_eq!(c.len(), 4);
        assert_eq!(c, m.lang_class_head(&[0.5; 8]));
    }

    #[test]
    fn caption_logits_are_causal_end_to_end() {
        let m = model();
        let (cloud, masks) = cloud_and_masks(false);
        let inst = m.pool(&cloud, &masks).unwrap();
        let ids = [CLS, 4, 5, 6, 7];
        let base = m.caption_forward(&inst, 1, &ids).unwrap();
        for t in 0..4 {
            let mut other = ids;
            for v in other.iter_mut().skip(t + 1) {
                *v = 10;
            }
            let out = m.caption_forward(&inst, 1, &other).unwrap();
            assert_eq!(out.fused_box, base.fused_box);
            for i in 0..=t {
                assert_eq!(out.logits.row(i), base.logits.row(i));
            }
        }
    }

    #[test]
    fn config_validation_names_the_field() {
        let mut c = ModelConfig::tiny(10, 3, 5);
        c.n_heads = 3;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("n_heads"), "{err}");
        let mut c = ModelConfig::tiny(10, 3, 5);
        c.vocab_size = 0;
        assert!(Model::new(c, 0).is_err());
    }
}
