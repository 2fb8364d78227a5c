use super::{ModuleMask, Params, TrainConfig};
use crate::datamodel::{BBox, Bag};
use crate::error::{Error, Result};
use crate::evalmetrics::Detection;
use crate::instance_branch::instance_probs;
use crate::numerics::{softmax_in_place, Graph, Tensor};
use crate::semantic_branch::semantic_forward;

/// `|B| × K` detection scores: `corr_ins(i,k) · softmax(ŷᵢ)[k]` with both
/// branches, otherwise the active branch's own scores. `running_corr`
/// replaces the bag's own category correlation when given.
pub fn fused_scores(bag: &Bag, params: &Params, running_corr: Option<&Tensor>, mask: &ModuleMask) -> Result<Tensor> {
    bag.validate(false)?;
    if params.num_classes() != bag.num_classes() || params.feature_dim() != bag.feature_dim() {
        return Err(Error::Compatibility(format!(
            "model has K={}, D={} but bag {} has K={}, D={}",
            params.num_classes(),
            params.feature_dim(),
            bag.image_id,
            bag.num_classes(),
            bag.feature_dim()
        )));
    }
    let corr = mask
        .m1
        .then(|| instance_probs(&bag.features, &params.head).map(|s| s.corr_ins))
        .transpose()?;
    let sem = if mask.m2 {
        let mut g = Graph::new();
        let x = g.constant(bag.features.clone())?;
        let w = g.constant(params.w_sem.clone())?;
        let f = semantic_forward(&mut g, x, w, running_corr)?;
        let mut y = g.value(f.y_hat).clone();
        for r in 0..y.rows() {
            softmax_in_place(y.row_mut(r));
        }
        Some(y)
    } else {
        None
    };
    match (corr, sem) {
        (Some(c), Some(s)) => c.zip_map(&s, |a, b| a * b),
        (Some(c), None) => Ok(c),
        (None, Some(s)) => Ok(s),
        (None, None) => Err(Error::Config("module mask needs M1 or M2".into())),
    }
}

/// Greedy non-maximum suppression: indices kept, best score first. A box
/// is dropped when its IoU with a kept box exceeds `iou_thr`. Equal scores
/// keep the lower index first.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&j| boxes[i].iou(&boxes[j]) <= iou_thr) {
            kept.push(i);
        }
    }
    kept
}

/// Per-class NMS over the fused scores, dropping scores below
/// `cfg.min_score`.
pub fn infer(
    bag: &Bag,
    params: &Params,
    running_corr: Option<&Tensor>,
    mask: &ModuleMask,
    cfg: &TrainConfig,
) -> Result<Vec<Detection>> {
    let scores = fused_scores(bag, params, running_corr, mask)?;
    let mut out = Vec::new();
    for k in 0..bag.num_classes() {
        let idx: Vec<usize> = (0..bag.len()).filter(|&i| scores.get(i, k) >= cfg.min_score).collect();
        let boxes: Vec<BBox> = idx.iter().map(|&i| bag.proposals[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores.get(i, k)).collect();
        for j in nms(&boxes, &s, cfg.nms_iou) {
            out.push(Detection {
                image_id: bag.image_id.clone(),
                bbox: boxes[j],
                class: k,
                score: s[j],
            });
        }
    }
    Ok(out)
}
