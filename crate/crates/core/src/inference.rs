//! Grounding selection, greedy caption decoding and dense-captioning sweeps.

use crate::geometry::{Aabb, InstanceMask, PointCloud};
use crate::metrics::{dedup_boxes, DenseCapItem, DenseCapPrediction};
use crate::model::{InstanceFeatures, Model, ModelError};
use crate::tensor::{argmax, Scalar};
use crate::textproc::{TokenSeq, Vocabulary, CLS, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeConfig {
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn new(max_len: usize) -> Result<Self, ModelError> {
        if max_len < 2 {
            return Err(ModelError::Config {
                field: "max_len",
                message: "decoding needs max_len >= 2".into(),
            });
        }
        Ok(Self { max_len })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingResult<T> {
    /// Winning proposal; the lowest index wins ties.
    pub index: usize,
    pub aabb: Aabb,
    pub scores: Vec<T>,
}

pub fn ground_features<T: Scalar>(
    model: &Model<T>,
    inst: &InstanceFeatures<T>,
    query: &TokenSeq,
) -> Result<GroundingResult<T>, ModelError> {
    let (scores, _) = model.ground(inst, query)?;
    let index = argmax(&scores);
    Ok(GroundingResult {
        index,
        aabb: inst.boxes[index],
        scores,
    })
}

pub fn ground_query<T: Scalar>(
    model: &Model<T>,
    cloud: &PointCloud,
    masks: &[InstanceMask],
    query: &TokenSeq,
) -> Result<GroundingResult<T>, ModelError> {
    let inst = model.pool(cloud, masks)?;
    ground_features(model, &inst, query)
}

/// Greedy decoding from `[CLS]` until `[SEP]` or `max_len` tokens.
pub fn generate_from_features<T: Scalar>(
    model: &Model<T>,
    inst: &InstanceFeatures<T>,
    target: usize,
    config: &DecodeConfig,
) -> Result<TokenSeq, ModelError> {
    let max_len = config.max_len.min(model.config().max_len);
    let mut ids = vec![CLS];
    while ids.len() < max_len {
        let out = model.caption_forward(inst, target, &ids)?;
        let next = argmax(out.logits.row(ids.len() - 1)) as u32;
        ids.push(next);
        if next == SEP {
            break;
        }
    }
    Ok(TokenSeq::new(ids))
}

pub fn generate_caption<T: Scalar>(
    model: &Model<T>,
    cloud: &PointCloud,
    masks: &[InstanceMask],
    target: usize,
    config: &DecodeConfig,
) -> Result<TokenSeq, ModelError> {
    let inst = model.pool(cloud, masks)?;
    generate_from_features(model, &inst, target, config)
}

/// One caption per proposal, boxes from the masks, confidence 1.0, then
/// duplicates against `gt_boxes` removed.
pub fn dense_caption_scene<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    scene_id: &str,
    cloud: &PointCloud,
    masks: &[InstanceMask],
    gt_boxes: &[Aabb],
    config: &DecodeConfig,
) -> Result<DenseCapPrediction, ModelError> {
    let inst = model.pool(cloud, masks)?;
    let mut items = Vec::with_capacity(inst.len());
    for i in 0..inst.len() {
        let seq = generate_from_features(model, &inst, i, config)?;
        items.push(DenseCapItem {
            aabb: inst.boxes[i],
            caption: vocab.decode(&seq.ids),
            confidence: 1.0,
        });
    }
    Ok(DenseCapPrediction {
        scene_id: scene_id.to_string(),
        items: dedup_boxes(&items, |it| it.aabb, gt_boxes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Matrix;

    fn setup() -> (Model<f64>, PointCloud, Vec<InstanceMask>) {
        let model = Model::new(ModelConfig::tiny(8, 3, 5), 4).unwrap();
        let mut cloud = PointCloud::empty(2);
        for i in 0..20 {
            let x = (i / 10) as f64 * 2.0 + (i % 10) as f64 * 0.1;
            cloud.push([x, (i % 3) as f64 * 0.2, (i % 4) as f64 * 0.3], &[0.1 * (i % 5) as f64, 0.5]);
        }
        let masks = vec![
            InstanceMask::new(1, 0, (0..10).collect()),
            InstanceMask::new(2, 1, (10..20).collect()),
        ];
        (model, cloud, masks)
    }

    /// Zeroes the caption head and puts all bias on `token`.
    fn always_emit(model: &mut Model<f64>, token: usize) {
        let w = model.params_mut().get_mut("caption_head.weight").unwrap();
        *w = Matrix::zeros(w.rows(), w.cols());
        let b = model.params_mut().get_mut("caption_head.bias").unwrap();
        let mut row = vec![0.0; b.cols()];
        row[token] = 5.0;
        *b = Matrix::row_vector(row);
    }

    #[test]
    fn singleton_grounding_has_score_one() {
        let (model, cloud, masks) = setup();
        let q = TokenSeq::new(vec![CLS, 5, SEP]);
        let r = ground_query(&model, &cloud, &masks[..1], &q).unwrap();
        assert_eq!((r.index, r.scores.clone()), (0, vec![1.0]));
        let r = ground_query(&model, &cloud, &masks, &q).unwrap();
        let inst = model.pool(&cloud, &masks).unwrap();
        assert!(inst.boxes.contains(&r.aabb));
        assert!(matches!(ground_query(&model, &cloud, &[], &q), Err(ModelError::NoProposals)));
    }

    #[test]
    fn immediate_stop_and_length_cap() {
        let (mut model, cloud, masks) = setup();
        let cfg = DecodeConfig::new(6).unwrap();
        always_emit(&mut model, SEP as usize);
        assert_eq!(generate_caption(&model, &cloud, &masks, 0, &cfg).unwrap().ids, vec![CLS, SEP]);
        always_emit(&mut model, 6);
        let seq = generate_caption(&model, &cloud, &masks, 1, &cfg).unwrap();
        assert_eq!(seq.ids, vec![CLS, 6, 6, 6, 6, 6]);
        assert!(seq.is_valid(6));
        assert!(DecodeConfig::new(1).is_err());
    }

    #[test]
    fn dense_captions_pair_with_boxes() {
        let (mut model, cloud, masks) = setup();
        always_emit(&mut model, SEP as usize);
        let vocab = Vocabulary::build(&["a b c d"], 1);
        let inst = model.pool(&cloud, &masks).unwrap();
        let pred = dense_caption_scene(&model, &vocab, "s", &cloud, &masks, &inst.boxes, &DecodeConfig::new(5).unwrap()).unwrap();
        assert_eq!(pred.items.len(), 2);
        assert_eq!(pred.items.iter().map(|i| i.aabb).collect::<Vec<_>>(), inst.boxes);
    }
}
