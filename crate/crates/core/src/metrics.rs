//! Grounding accuracy, captioning precision/recall/F1, sentence metrics and
//! detection mAP.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, Aabb};
use crate::textproc::tokenize;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ground-truth set is empty")]
    EmptyGroundTruth,
    #[error("unknown metric `{0}` (expected cider, bleu4 or rouge_l)")]
    UnknownMetric(String),
    #[error("reference list is empty")]
    NoReferences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingPrediction {
    pub query_id: String,
    pub scene_id: String,
    pub pred_box: Aabb,
    pub gt_box: Aabb,
    pub gt_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub unique: f64,
    pub multiple: f64,
    pub overall: f64,
    pub n_unique: usize,
    pub n_multiple: usize,
}

/// Acc@k split by whether the query's scene holds exactly one object of the
/// query class. `class_counts` maps `(scene, class)` to the number of ground
/// truth objects; missing entries count as one. Empty splits report 0.
pub fn acc_at_kiou(
    preds: &[GroundingPrediction],
    class_counts: &HashMap<(String, usize), usize>,
    k: f64,
) -> SplitAccuracy {
    let (mut hu, mut nu, mut hm, mut nm) = (0usize, 0usize, 0usize, 0usize);
    for p in preds {
        let hit = iou(&p.pred_box, &p.gt_box) > k;
        let count = class_counts.get(&(p.scene_id.clone(), p.gt_class)).copied().unwrap_or(1);
        if count == 1 {
            nu += 1;
            hu += hit as usize;
        } else {
            nm += 1;
            hm += hit as usize;
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    SplitAccuracy {
        unique: ratio(hu, nu),
        multiple: ratio(hm, nm),
        overall: ratio(hu + hm, nu + nm),
        n_unique: nu,
        n_multiple: nm,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCapItem {
    pub aabb: Aabb,
    pub caption: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCapPrediction {
    pub scene_id: String,
    pub items: Vec<DenseCapItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCapGtItem {
    pub aabb: Aabb,
    pub references: Vec<String>,
    pub semantic_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCapGroundTruth {
    pub scene_id: String,
    pub items: Vec<DenseCapGtItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceMetric {
    Cider,
    Bleu4,
    RougeL,
}

impl SentenceMetric {
    pub const ALL: [SentenceMetric; 3] = [SentenceMetric::Cider, SentenceMetric::Bleu4, SentenceMetric::RougeL];

    pub fn parse(name: &str) -> Result<Self, MetricError> {
        match name.to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "cider" => Ok(Self::Cider),
            "bleu4" | "bleu_4" => Ok(Self::Bleu4),
            "rouge_l" | "rougel" => Ok(Self::RougeL),
            _ => Err(MetricError::UnknownMetric(name.to_string())),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Cider => "CIDEr",
            Self::Bleu4 => "BLEU-4",
            Self::RougeL => "ROUGE-L",
        }
    }
}

type Ngram = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Document frequencies of n-grams (n = 1..=4) over reference sets, the IDF
/// source for CIDEr.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CiderCorpus {
    doc_freq: HashMap<Ngram, usize>,
    n_docs: usize,
}

impl CiderCorpus {
    /// One document per reference set.
    pub fn new<S: AsRef<str>>(reference_sets: &[Vec<S>]) -> Self {
        let mut doc_freq: HashMap<Ngram, usize> = HashMap::new();
        for refs in reference_sets {
            let mut seen: std::collections::HashSet<Ngram> = std::collections::HashSet::new();
            for r in refs {
                let toks = tokenize(r.as_ref());
                for n in 1..=4 {
                    seen.extend(ngram_counts(&toks, n).into_keys());
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_insert(0) += 1;
            }
        }
        Self {
            doc_freq,
            n_docs: reference_sets.len(),
        }
    }

    pub fn from_ground_truth(gts: &[DenseCapGroundTruth]) -> Self {
        let sets: Vec<Vec<String>> = gts
            .iter()
            .flat_map(|g| g.items.iter().map(|i| i.references.clone()))
            .collect();
        Self::new(&sets)
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    fn idf(&self, g: &Ngram) -> f64 {
        let df = self.doc_freq.get(g).copied().unwrap_or(0) as f64;
        (self.n_docs.max(1) as f64).ln() - df.max(1.0).ln()
    }

    fn tfidf(&self, tokens: &[String], n: usize) -> HashMap<Ngram, f64> {
        let counts = ngram_counts(tokens, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 / total.max(1) as f64 * self.idf(&g);
                (g, w)
            })
            .collect()
    }
}

fn cosine(a: &HashMap<Ngram, f64>, b: &HashMap<Ngram, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr: mean over n = 1..=4 of the mean cosine similarity between TF-IDF
/// vectors of candidate and each reference, scaled by 10.
pub fn cider(candidate: &str, references: &[String], corpus: &CiderCorpus) -> Result<f64, MetricError> {
    if references.is_empty() {
        return Err(MetricError::NoReferences);
    }
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let mut score = 0.0;
    for n in 1..=4 {
        let c = corpus.tfidf(&cand, n);
        let s: f64 = refs.iter().map(|r| cosine(&c, &corpus.tfidf(r, n))).sum();
        score += s / refs.len() as f64;
    }
    Ok(10.0 * score / 4.0)
}

/// BLEU-4 with clipped n-gram precision, brevity penalty against the closest
/// reference length (shorter wins ties), and add-one smoothing of orders
/// with no match: `p_n = 1 / (total_n + 1)`.
pub fn bleu4(candidate: &str, references: &[String]) -> Result<f64, MetricError> {
    if references.is_empty() {
        return Err(MetricError::NoReferences);
    }
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let counts = ngram_counts(&cand, n);
        let total: usize = counts.values().sum();
        let mut max_ref: HashMap<&Ngram, usize> = HashMap::new();
        for r in &refs {
            let rc = ngram_counts(r, n);
            for g in counts.keys() {
                let c = rc.get(g).copied().unwrap_or(0);
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = counts.iter().map(|(g, &c)| c.min(max_ref[g])).sum();
        let p = if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| ((l as i64 - c as i64).abs(), l))
        .expect("non-empty references");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / 4.0).exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with beta = 1.2, taking the best precision and best
/// recall over references.
pub fn rouge_l(candidate: &str, references: &[String]) -> Result<f64, MetricError> {
    if references.is_empty() {
        return Err(MetricError::NoReferences);
    }
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references {
        let rt = tokenize(reference);
        if rt.is_empty() {
            continue;
        }
        let l = lcs(&cand, &rt) as f64;
        p = p.max(l / cand.len() as f64);
        r = r.max(l / rt.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return Ok(0.0);
    }
    let beta2 = 1.2f64 * 1.2;
    Ok((1.0 + beta2) * p * r / (r + beta2 * p))
}

pub fn sentence_metric(
    metric: SentenceMetric,
    candidate: &str,
    references: &[String],
    corpus: &CiderCorpus,
) -> Result<f64, MetricError> {
    match metric {
        SentenceMetric::Cider => cider(candidate, references, corpus),
        SentenceMetric::Bleu4 => bleu4(candidate, references),
        SentenceMetric::RougeL => rouge_l(candidate, references),
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p == r {
        p
    } else if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn argmax_iou(b: &Aabb, others: &[Aabb]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in others.iter().enumerate() {
        let v = iou(b, o);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best
}

/// Captioning precision, recall and F1 at IoU threshold `k`.
///
/// Each prediction is scored against its highest-IoU ground truth in the same
/// scene and each ground truth against its highest-IoU prediction; a pair
/// counts only when the IoU exceeds `k`. An empty prediction set gives P = 0.
pub fn caption_prf(
    preds: &[DenseCapPrediction],
    gts: &[DenseCapGroundTruth],
    metric: SentenceMetric,
    k: f64,
    corpus: &CiderCorpus,
) -> Result<Prf, MetricError> {
    let n_gt: usize = gts.iter().map(|g| g.items.len()).sum();
    if n_gt == 0 {
        return Err(MetricError::EmptyGroundTruth);
    }
    let empty_pred: Vec<DenseCapItem> = Vec::new();
    let empty_gt: Vec<DenseCapGtItem> = Vec::new();
    let pred_items = |scene: &str| preds.iter().find(|p| p.scene_id == scene).map_or(&empty_pred, |p| &p.items);
    let gt_items = |scene: &str| gts.iter().find(|g| g.scene_id == scene).map_or(&empty_gt, |g| &g.items);

    let mut p_sum = 0.0;
    let mut n_pred = 0usize;
    for scene in preds {
        let g = gt_items(&scene.scene_id);
        let g_boxes: Vec<Aabb> = g.iter().map(|i| i.aabb).collect();
        for item in &scene.items {
            n_pred += 1;
            if let Some((j, v)) = argmax_iou(&item.aabb, &g_boxes) {
                if v > k {
                    p_sum += sentence_metric(metric, &item.caption, &g[j].references, corpus)?;
                }
            }
        }
    }
    let mut r_sum = 0.0;
    for scene in gts {
        let p = pred_items(&scene.scene_id);
        let p_boxes: Vec<Aabb> = p.iter().map(|i| i.aabb).collect();
        for item in &scene.items {
            if let Some((j, v)) = argmax_iou(&item.aabb, &p_boxes) {
                if v > k {
                    r_sum += sentence_metric(metric, &p[j].caption, &item.references, corpus)?;
                }
            }
        }
    }
    let precision = if n_pred == 0 { 0.0 } else { p_sum / n_pred as f64 };
    let recall = r_sum / n_gt as f64;
    Ok(Prf {
        precision,
        recall,
        f1: f1(precision, recall),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: String,
    pub aabb: Aabb,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub scene_id: String,
    pub aabb: Aabb,
    pub class: usize,
}

/// Area under the all-point interpolated precision/recall curve.
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        ap += (recall[i] - recall[i - 1]) * precision[i];
    }
    ap
}

/// Mean over classes with at least one ground truth of per-class AP.
/// Detections are visited by descending confidence (input order breaks
/// ties) and each takes the unmatched same-scene ground truth of highest IoU,
/// provided that IoU exceeds `k`.
pub fn map_at_k(dets: &[Detection], gts: &[GtObject], k: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let class_gts: Vec<&GtObject> = gts.iter().filter(|g| g.class == c).collect();
        let mut class_dets: Vec<&Detection> = dets.iter().filter(|d| d.class == c).collect();
        class_dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut used = vec![false; class_gts.len()];
        let mut flags = Vec::with_capacity(class_dets.len());
        for d in class_dets {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in class_gts.iter().enumerate() {
                if used[j] || g.scene_id != d.scene_id {
                    continue;
                }
                let v = iou(&d.aabb, &g.aabb);
                if v > k && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    flags.push(true);
                }
                None => flags.push(false),
            }
        }
        total += average_precision(&flags, class_gts.len());
    }
    total / classes.len() as f64
}

/// Keeps, for each ground truth, only the best-overlapping prediction among
/// those whose argmax-IoU ground truth it is. Predictions overlapping no
/// ground truth pass through. Order is preserved.
pub fn dedup_boxes<T: Clone>(preds: &[T], boxes: impl Fn(&T) -> Aabb, gts: &[Aabb]) -> Vec<T> {
    let assigned: Vec<Option<(usize, f64)>> = preds
        .iter()
        .map(|p| argmax_iou(&boxes(p), gts).filter(|&(_, v)| v > 0.0))
        .collect();
    let mut keep = vec![true; preds.len()];
    for (i, a) in assigned.iter().enumerate() {
        let Some((g, v)) = a else { continue };
        for (j, b) in assigned.iter().enumerate() {
            if let Some((h, w)) = b {
                if h == g && (w > v || (w == v && j < i)) {
                    keep[i] = false;
                    break;
                }
            }
        }
    }
    preds.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p.clone()).collect()
}

/// Full captioning report at both thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub rows: Vec<(SentenceMetric, f64, Prf)>,
}

pub const THRESHOLDS: [f64; 2] = [0.25, 0.5];

pub fn caption_report(preds: &[DenseCapPrediction], gts: &[DenseCapGroundTruth]) -> Result<CaptionReport, MetricError> {
    let corpus = CiderCorpus::from_ground_truth(gts);
    let mut rows = Vec::new();
    for m in SentenceMetric::ALL {
        for k in THRESHOLDS {
            rows.push((m, k, caption_prf(preds, gts, m, k, &corpus)?));
        }
    }
    Ok(CaptionReport { rows })
}
