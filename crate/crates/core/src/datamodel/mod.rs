//! Boxes, bags of proposals, ground truth, JSONL fixtures and the synthetic
//! scene generator.

mod generate;
mod io;

pub use generate::{default_cooccurrence, generate_dataset, SceneConfig};
pub use io::{load_jsonl, read_jsonl, save_jsonl, write_jsonl};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Minimum proposal side kept by [`filter_proposals`], in pixels.
pub const MIN_PROPOSAL_SIDE: f64 = 16.0;

/// Axis-aligned box in pixel coordinates, `x2 > x1` and `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x1, self.y1, self.x2, self.y2];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite box {:?}", c)));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::Contract(format!("degenerate box {:?}", c)));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn within(&self, canvas: [f64; 2]) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= canvas[0] && self.y2 <= canvas[1]
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Lexicographic order on `(x1, y1, x2, y2)`.
    pub fn lex_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

/// One image's proposals: the multiple-instance bag.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub image_id: String,
    pub canvas: [f64; 2],
    pub proposals: Vec<BBox>,
    /// `|B| × D`, row `i` describes `proposals[i]`.
    pub features: Tensor,
    /// Image-level tags, one 0/1 entry per class.
    pub tags: Vec<u8>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.tags.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn positive_classes(&self) -> Vec<usize> {
        (0..self.tags.len()).filter(|&k| self.tags[k] == 1).collect()
    }

    /// Checks the structural invariants. `training` additionally requires a
    /// positive tag.
    pub fn validate(&self, training: bool) -> Result<()> {
        if self.proposals.is_empty() {
            return Err(Error::EmptyBag(self.image_id.clone()));
        }
        if self.features.rows() != self.proposals.len() || self.features.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "{}: {} proposals but features of shape {:?}",
                self.image_id,
                self.proposals.len(),
                self.features.shape()
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::Contract(format!("{}: non-finite features", self.image_id)));
        }
        if self.tags.iter().any(|&t| t > 1) {
            return Err(Error::Contract(format!("{}: tags must be 0/1", self.image_id)));
        }
        if training && !self.tags.contains(&1) {
            return Err(Error::Contract(format!(
                "{}: training bag without a positive tag",
                self.image_id
            )));
        }
        for b in &self.proposals {
            b.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub bbox: BBox,
    pub class: usize,
}

/// Box-level annotations; consumed only by evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub objects: Vec<GtObject>,
}

/// Bags with their (evaluation-only) ground truth, index-aligned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub ground_truth: Vec<GroundTruth>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// `(K, D)` of the first bag, if any.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.bags.first().map(|b| (b.num_classes(), b.feature_dim()))
    }

    /// Splits off the first `n` scenes.
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.bags.len());
        let rest_bags = self.bags.split_off(n);
        let rest_gt = self.ground_truth.split_off(n);
        (
            self,
            Dataset {
                bags: rest_bags,
                ground_truth: rest_gt,
            },
        )
    }

    /// Applies [`filter_proposals`] to every bag.
    pub fn filtered(&self, min_side: f64) -> Result<Dataset> {
        Ok(Dataset {
            bags: self
                .bags
                .iter()
                .map(|b| filter_proposals(b, min_side))
                .collect::<Result<_>>()?,
            ground_truth: self.ground_truth.clone(),
        })
    }
}

/// Drops proposals whose width or height is below `min_side`, keeping
/// feature rows aligned.
pub fn filter_proposals(bag: &Bag, min_side: f64) -> Result<Bag> {
    let keep: Vec<usize> = (0..bag.len())
        .filter(|&i| {
            let b = &bag.proposals[i];
            b.width() >= min_side && b.height() >= min_side
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyBag(format!(
            "{}: every proposal is smaller than {} px",
            bag.image_id, min_side
        )));
    }
    let d = bag.feature_dim();
    let mut data = Vec::with_capacity(keep.len() * d);
    for &i in &keep {
        data.extend_from_slice(bag.features.row(i));
    }
    Ok(Bag {
        image_id: bag.image_id.clone(),
        canvas: bag.canvas,
        proposals: keep.iter().map(|&i| bag.proposals[i]).collect(),
        features: Tensor::matrix(keep.len(), d, data)?,
        tags: bag.tags.clone(),
    })
}
