//! Assembled per-image detection loss: Hungarian matching followed by focal
//! classification, L1 and GIoU terms.

use ndarray::Array2;

use crate::error::Result;
use crate::tensor::{Arr, Tensor};

use super::boxes::{giou_rows, l1_rows};
use super::classify::{focal_terms, FOCAL_ALPHA, FOCAL_GAMMA};
use super::matching::{hungarian_match, MatchResult, MatchWeights};

pub struct SetLosses<'t> {
    /// focal classification over every query/phrase logit, normalized by
    /// object count
    pub cls: Tensor<'t>,
    /// mean L1 over matched boxes
    pub l1: Tensor<'t>,
    /// mean (1 − GIoU) over matched boxes
    pub giou: Tensor<'t>,
}

impl<'t> SetLosses<'t> {
    pub fn weighted(&self, w: &MatchWeights) -> Tensor<'t> {
        self.cls
            .scale(w.cls)
            .add(&self.l1.scale(w.l1))
            .add(&self.giou.scale(w.giou))
    }
}

/// Match queries to objects on current values, then compute the losses on
/// the live graph. Matched pairs are processed in query order so the result
/// is exactly invariant to ground-truth ordering.
pub fn detection_set_loss<'t>(
    logits: Tensor<'t>,
    boxes: Tensor<'t>,
    gt_boxes: &Array2<f32>,
    gt_phrase: &[usize],
    weights: &MatchWeights,
) -> Result<(SetLosses<'t>, MatchResult)> {
    let boxes_v2 = boxes.to_arr();
    let logits_v2 = logits.to_arr();
    let bv = boxes_v2.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let lv = logits_v2.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let m = hungarian_match(
        &bv.to_owned(),
        &lv.to_owned(),
        gt_boxes,
        gt_phrase,
        weights,
    )?;

    let (q, p) = (logits.dims()[0], logits.dims()[1]);
    let g = m.pairs.len();
    let mut targets = Arr::zeros(ndarray::IxDyn(&[q, p]));
    for &(qi, gi) in &m.pairs {
        targets[[qi, gt_phrase[gi]]] = 1.0;
    }
    let norm = 1.0 / g.max(1) as f32;
    let cls = focal_terms(logits, &targets, FOCAL_GAMMA, FOCAL_ALPHA)
        .sum_all()
        .scale(norm);

    if g == 0 {
        let zero = boxes.sum_all().scale(0.0);
        return Ok((
            SetLosses {
                cls,
                l1: zero,
                giou: zero,
            },
            m,
        ));
    }

    let qidx: Vec<usize> = m.pairs.iter().map(|&(qi, _)| qi).collect();
    let mut gt_ordered = Array2::<f32>::zeros((g, 4));
    for (row, &(_, gi)) in m.pairs.iter().enumerate() {
        for j in 0..4 {
            gt_ordered[[row, j]] = gt_boxes[[gi, j]];
        }
    }
    let matched = boxes.select_rows(&qidx);
    let l1 = l1_rows(matched, &gt_ordered).mean_all();
    let giou = giou_rows(matched, &gt_ordered)?
        .neg()
        .add_scalar(1.0)
        .mean_all();
    Ok((SetLosses { cls, l1, giou }, m))
}
