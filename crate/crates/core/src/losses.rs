//! Scalar loss definitions and the per-stage loss compositions.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, Aabb};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Joint,
    FinetuneGrounding,
    FinetuneCaptioning,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Pretrain, Stage::Joint, Stage::FinetuneGrounding, Stage::FinetuneCaptioning];

    pub fn uses_grounding(self) -> bool {
        !matches!(self, Stage::FinetuneCaptioning)
    }

    pub fn uses_captioning(self) -> bool {
        !matches!(self, Stage::FinetuneGrounding)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Joint => "joint",
            Stage::FinetuneGrounding => "finetune_grounding",
            Stage::FinetuneCaptioning => "finetune_captioning",
        }
    }
}

/// Loss components of one step. `l_pg` is the detection term, always 0 here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_g: f64,
    pub l_cls: f64,
    pub l_c: f64,
    pub l_pg: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_g, self.l_cls, self.l_c, self.l_pg, self.total].iter().all(|v| v.is_finite())
    }
}

/// Stage totals, summed left to right:
///
/// | stage | total |
/// |---|---|
/// | finetune grounding | `l_pg + l_g + l_cls` |
/// | finetune captioning | `l_pg + l_c` |
/// | joint | `l_pg + l_g + l_cls + l_c` |
/// | pretrain | `l_g + l_cls + l_c` |
pub fn compose_loss(stage: Stage, l_g: f64, l_cls: f64, l_c: f64) -> LossBundle {
    let l_pg = 0.0;
    let total = match stage {
        Stage::FinetuneGrounding => l_pg + l_g + l_cls,
        Stage::FinetuneCaptioning => l_pg + l_c,
        Stage::Joint => l_pg + l_g + l_cls + l_c,
        Stage::Pretrain => l_g + l_cls + l_c,
    };
    LossBundle {
        l_g,
        l_cls,
        l_c,
        l_pg,
        total,
    }
}

/// Proposal with the highest IoU against `gt`; the lowest index wins ties.
pub fn grounding_target(proposals: &[Aabb], gt: &Aabb) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in proposals.iter().enumerate() {
        let v = iou(p, gt);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Cross-entropy of proposal probabilities against the max-IoU proposal.
pub fn grounding_loss(probs: &[f64], proposals: &[Aabb], gt: &Aabb) -> f64 {
    assert_eq!(probs.len(), proposals.len(), "one probability per proposal");
    let t = grounding_target(proposals, gt).expect("at least one proposal");
    -probs[t].ln()
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Mean next-word cross-entropy over positions where `real` is set.
pub fn caption_loss(logits: &Matrix<f64>, targets: &[u32], real: &[bool]) -> f64 {
    assert_eq!(logits.rows(), targets.len(), "one target per logit row");
    assert_eq!(targets.len(), real.len(), "one pad flag per target");
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, (&t, &keep)) in targets.iter().zip(real).enumerate() {
        if keep {
            sum -= log_softmax_at(logits.row(r), t as usize);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(x: f64) -> Aabb {
        Aabb::new([x, 0.0, 0.0], [x + 1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn grounding_loss_cases() {
        let boxes: Vec<Aabb> = (0..4).map(|i| unit_box(i as f64 * 3.0)).collect();
        let gt = unit_box(6.2);
        assert_eq!(grounding_target(&boxes, &gt), Some(2));
        assert!((grounding_loss(&[0.25; 4], &boxes, &gt) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(grounding_loss(&[0.0, 0.0, 1.0, 0.0], &boxes, &gt), 0.0);
        let p = [0.1, 0.2, 0.3, 0.4];
        assert!((grounding_loss(&p, &boxes, &gt) - 1.2039728043259361).abs() < 1e-12);
        // equal IoU goes to the lower index
        let twins = [unit_box(0.0), unit_box(0.0)];
        assert_eq!(grounding_target(&twins, &unit_box(0.0)), Some(0));
    }

    #[test]
    fn caption_loss_cases() {
        let v = 7;
        let uniform = Matrix::zeros(3, v);
        assert!((caption_loss(&uniform, &[1, 2, 3], &[true; 3]) - (v as f64).ln()).abs() < 1e-12);
        let mut sharp = Matrix::zeros(2, v);
        sharp.set(0, 4, 60.0);
        sharp.set(1, 5, 60.0);
        assert!(caption_loss(&sharp, &[4, 5], &[true, true]) < 1e-20);
        let logits = Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 1.0, 0.0], vec![9.0, 9.0, 9.0]]);
        // position-by-position: -ln softmax
        let p0 = -(2.0f64.exp() / (0.5f64.exp() + (-1.0f64).exp() + 2.0f64.exp())).ln();
        let p1 = -(1.0f64.exp() / (2.0 * 1.0f64.exp() + 1.0)).ln();
        let got = caption_loss(&logits, &[2, 0, 1], &[true, true, false]);
        assert!((got - (p0 + p1) / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn compose_examples() {
        assert_eq!(compose_loss(Stage::FinetuneGrounding, 1.0, 0.5, 9.0).total, 1.5);
        assert_eq!(compose_loss(Stage::FinetuneCaptioning, 9.0, 9.0, 2.0).total, 2.0);
        assert_eq!(compose_loss(Stage::Joint, 1.0, 0.5, 2.0).total, 3.5);
        assert_eq!(compose_loss(Stage::Pretrain, 1.0, 0.5, 2.0).total, 3.5);
        assert_eq!(compose_loss(Stage::Joint, 1.0, 0.5, 2.0).l_pg, 0.0);
    }
}
