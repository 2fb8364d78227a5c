//! Instance-wise detection branch.
//!
//! Per-instance class probabilities come from a two-stream MIL head: a class
//! softmax over categories multiplied by a detection softmax over instances,
//! so every column of `corr_ins` sums to at most one and the image-level
//! score `Σ_i corr_ins(i, k)` stays in `[0, 1]`. A separate `(K+1)`-way
//! per-instance distribution (classes plus background) is trained against
//! approximated instance labels with a seed-weighted cross-entropy.

use crate::error::{Error, Result};
use crate::numerics::{smooth_max, softmax_in_place, Graph, Tensor, Var};

/// Clamp applied to image-level scores before the binary cross-entropy.
pub const SCORE_CLAMP_EPS: f64 = 1e-7;

/// Learnable parameters of the branch.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    /// `D × K` classification stream.
    pub w_cls: Tensor,
    /// `D × K` detection stream.
    pub w_det: Tensor,
    /// `D × 1` background logit appended to the classification logits.
    pub w_bg: Tensor,
}

impl DetectionHead {
    pub fn zeros(d: usize, k: usize) -> Self {
        Self {
            w_cls: Tensor::zeros(&[d, k]),
            w_det: Tensor::zeros(&[d, k]),
            w_bg: Tensor::zeros(&[d, 1]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w_cls.cols()
    }
}

/// The head's tensors as graph leaves.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_cls: Var,
    pub w_det: Var,
    pub w_bg: Var,
}

impl HeadVars {
    pub fn params(g: &mut Graph, head: &DetectionHead) -> Result<Self> {
        Ok(Self {
            w_cls: g.param(head.w_cls.clone())?,
            w_det: g.param(head.w_det.clone())?,
            w_bg: g.param(head.w_bg.clone())?,
        })
    }
}

/// Graph nodes produced by [`instance_forward`].
#[derive(Debug, Clone, Copy)]
pub struct InstanceForward {
    /// `|B| × K`
    pub corr_ins: Var,
    /// `|B| × (K+1)` logits of the per-instance distribution `S`.
    pub s_logits: Var,
    /// `[K]`, column sums of `corr_ins`.
    pub image_scores: Var,
}

/// Value snapshot of the branch outputs for one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceScores {
    pub corr_ins: Tensor,
    /// Rows sum to one; the last column is background.
    pub s: Tensor,
    pub image_scores: Tensor,
}

impl InstanceScores {
    pub fn from_graph(g: &Graph, fwd: &InstanceForward) -> Self {
        let mut s = g.value(fwd.s_logits).clone();
        for r in 0..s.rows() {
            softmax_in_place(s.row_mut(r));
        }
        Self {
            corr_ins: g.value(fwd.corr_ins).clone(),
            s,
            image_scores: g.value(fwd.image_scores).clone(),
        }
    }
}

/// Instance-level labels induced from `corr_ins` and the image tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxLabels {
    /// Class index in `0..K`, or `K` for background.
    pub labels: Vec<usize>,
    pub seed_weights: Vec<f64>,
}

impl ApproxLabels {
    /// `|B| × (K+1)` one-hot encoding of the labels.
    pub fn one_hot(&self, k: usize) -> Tensor {
        let mut t = Tensor::zeros(&[self.labels.len(), k + 1]);
        for (i, &l) in self.labels.iter().enumerate() {
            t.set(i, l, 1.0);
        }
        t
    }
}

fn check_bag(features: &Tensor) -> Result<()> {
    if features.rows() == 0 {
        return Err(Error::EmptyBag("no instances".into()));
    }
    Ok(())
}

/// Visual-only detection scores: per-class softmax over instances of
/// `features · W_det`.
pub fn baseline_scores(features: &Tensor, w_det: &Tensor) -> Result<Tensor> {
    check_bag(features)?;
    let logits = features.matmul(w_det)?;
    let mut t = logits.transpose();
    for r in 0..t.rows() {
        softmax_in_place(t.row_mut(r));
    }
    let out = t.transpose();
    if !out.is_finite() {
        return Err(Error::NonFinite("baseline_scores"));
    }
    Ok(out)
}

/// Builds `corr_ins`, the `(K+1)`-way logits and the image-level scores.
pub fn instance_forward(g: &mut Graph, features: Var, head: &HeadVars) -> Result<InstanceForward> {
    check_bag(g.value(features))?;
    let cls_logits = g.matmul(features, head.w_cls)?;
    let det_logits = g.matmul(features, head.w_det)?;
    let cls = g.softmax_rows(cls_logits)?;
    let det = g.softmax_cols(det_logits)?;
    let corr_ins = g.mul(cls, det)?;
    let bg_logit = g.matmul(features, head.w_bg)?;
    let s_logits = g.concat_cols(cls_logits, bg_logit)?;
    let image_scores = g.column_sums(corr_ins)?;
    Ok(InstanceForward {
        corr_ins,
        s_logits,
        image_scores,
    })
}

/// Tensor-level convenience around [`instance_forward`].
pub fn instance_probs(features: &Tensor, head: &DetectionHead) -> Result<InstanceScores> {
    let mut g = Graph::new();
    let x = g.constant(features.clone())?;
    let h = HeadVars {
        w_cls: g.constant(head.w_cls.clone())?,
        w_det: g.constant(head.w_det.clone())?,
        w_bg: g.constant(head.w_bg.clone())?,
    };
    let fwd = instance_forward(&mut g, x, &h)?;
    Ok(InstanceScores::from_graph(&g, &fwd))
}

/// Per-class smooth maximum of `corr_ins` over instances.
pub fn aggregate_lse(corr_ins: &Tensor, r: f64) -> Result<Tensor> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Parameter(format!("LSE sharpness must be > 0, got {}", r)));
    }
    check_bag(corr_ins)?;
    Ok(Tensor::vector(
        (0..corr_ins.cols())
            .map(|k| smooth_max(&corr_ins.column(k), r))
            .collect(),
    ))
}

/// Labels instances whose score reaches `γ ·` the best score of a positive
/// class. An instance eligible for several classes takes the one with the
/// highest score (lowest index on ties). A positive class left without any
/// instance then claims its best-scoring instance that is background or
/// shares its label with another instance.
pub fn approx_labels(corr_ins: &Tensor, tags: &[u8], gamma: f64) -> Result<ApproxLabels> {
    let (n, k) = corr_ins.dims();
    if tags.len() != k {
        return Err(Error::dim(
            "approx_labels",
            format!("{} tags for {} classes", tags.len(), k),
        ));
    }
    if !tags.contains(&1) {
        return Err(Error::Contract("approx_labels needs a positive tag".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma must be in [0,1], got {}", gamma)));
    }
    check_bag(corr_ins)?;
    let positives: Vec<usize> = (0..k).filter(|&c| tags[c] == 1).collect();
    let thresholds: Vec<f64> = (0..k)
        .map(|c| gamma * corr_ins.column(c).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let mut labels = vec![k; n];
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best: Option<usize> = None;
        for &c in &positives {
            let v = corr_ins.get(i, c);
            if v >= thresholds[c] && best.is_none_or(|b| v > corr_ins.get(i, b)) {
                best = Some(c);
            }
        }
        if let Some(c) = best {
            *label = c;
        }
    }

    for &c in &positives {
        if labels.contains(&c) {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| corr_ins.get(b, c).total_cmp(&corr_ins.get(a, c)).then(a.cmp(&b)));
        let pick = order.into_iter().find(|&i| {
            let l = labels[i];
            l == k || labels.iter().filter(|&&x| x == l).count() >= 2
        });
        if let Some(i) = pick {
            labels[i] = c;
        }
    }

    let seed_weights = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l < k {
                corr_ins.get(i, l)
            } else {
                1.0 - corr_ins.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();
    Ok(ApproxLabels {
        labels,
        seed_weights,
    })
}

/// Image-level binary cross-entropy on the clamped scores plus the
/// seed-weighted `(K+1)`-way cross-entropy of every instance.
pub fn instance_loss(
    g: &mut Graph,
    fwd: &InstanceForward,
    labels: &ApproxLabels,
    tags: &[u8],
) -> Result<Var> {
    let k = tags.len();
    let n = labels.labels.len();
    if g.value(fwd.image_scores).len() != k || g.value(fwd.s_logits).dims() != (n, k + 1) {
        return Err(Error::dim(
            "instance_loss",
            format!(
                "{} tags, {} labels vs scores {:?} / logits {:?}",
                k,
                n,
                g.value(fwd.image_scores).shape(),
                g.value(fwd.s_logits).shape()
            ),
        ));
    }
    for (i, &l) in labels.labels.iter().enumerate() {
        if l > k || (l < k && tags[l] != 1) {
            return Err(Error::Contract(format!(
                "instance {} labeled {} but tags are {:?}",
                i, l, tags
            )));
        }
    }

    let p = g.clamp(fwd.image_scores, SCORE_CLAMP_EPS, 1.0 - SCORE_CLAMP_EPS)?;
    let log_p = g.log(p)?;
    let q = g.affine(p, -1.0, 1.0)?;
    let log_q = g.log(q)?;
    let y = g.constant(Tensor::vector(tags.iter().map(|&t| f64::from(t)).collect()))?;
    let not_y = g.constant(Tensor::vector(tags.iter().map(|&t| 1.0 - f64::from(t)).collect()))?;
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let ll = g.add(pos, neg)?;
    let ll = g.sum(ll)?;
    let mce = g.affine(ll, -1.0, 0.0)?;

    let log_s = g.log_softmax_rows(fwd.s_logits)?;
    let picked = g.gather(log_s, labels.labels.iter().copied().enumerate().collect())?;
    let w = g.constant(Tensor::vector(labels.seed_weights.clone()))?;
    let weighted = g.mul(picked, w)?;
    let ce = g.sum(weighted)?;
    let ce = g.affine(ce, -1.0, 0.0)?;

    g.add(mce, ce)
}
