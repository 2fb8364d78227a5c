//! Synthetic scenes standing in for a CNN backbone plus proposal generator.
//!
//! Each class has an orthonormal prototype direction. An object proposal's
//! feature is `iou · prototype + α · context + noise`, where `iou` is the
//! overlap with its own object and `context` is the mean prototype of the
//! other classes in the scene. Background proposals carry only the scene
//! context and noise. Classes are drawn through a co-occurrence matrix so
//! that the category correlation structure is learnable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Bag, BBox, Dataset, GroundTruth, GtObject};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Bounds on the IoU of the loose ("part" or "enlarged") object proposals.
const LOOSE_IOU: (f64, f64) = (0.3, 0.5);
/// Background boxes overlap every object by less than this.
const BACKGROUND_MAX_IOU: f64 = 0.3;
const MAX_TRIES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub canvas: [f64; 2],
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_side: f64,
    pub max_object_side: f64,
    /// Total proposals per scene; background fills what objects leave.
    pub proposals_per_scene: usize,
    /// One tight proposal plus `n - 1` loose ones per object.
    pub proposals_per_object: usize,
    /// Standard deviation of the tight proposal's corner jitter, as a
    /// fraction of the object side.
    pub jitter: f64,
    pub min_background_side: f64,
    pub max_background_side: f64,
    /// Row-major `K × K` class co-occurrence weights.
    pub cooccurrence: Vec<f64>,
    pub noise_sigma: f64,
    pub context_weight: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let classes = 6;
        Self {
            classes,
            feature_dim: 32,
            canvas: [256.0, 256.0],
            min_objects: 1,
            max_objects: 4,
            min_object_side: 40.0,
            max_object_side: 120.0,
            proposals_per_scene: 30,
            proposals_per_object: 4,
            jitter: 0.05,
            min_background_side: 8.0,
            max_background_side: 96.0,
            cooccurrence: default_cooccurrence(classes),
            noise_sigma: 0.1,
            context_weight: 0.2,
            seed: 7,
        }
    }
}

/// Classes `(0,1)`, `(2,3)`, … co-occur strongly; every other pair weakly.
pub fn default_cooccurrence(k: usize) -> Vec<f64> {
    let mut m = vec![0.15; k * k];
    for i in 0..k {
        m[i * k + i] = 0.0;
        let partner = i ^ 1;
        if partner < k {
            m[i * k + partner] = 0.8;
        }
    }
    m
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.classes;
        let err = |m: String| Err(Error::Config(m));
        if k == 0 {
            return err("classes must be at least 1".into());
        }
        if self.feature_dim < k {
            return err(format!(
                "feature_dim ({}) must be at least classes ({})",
                self.feature_dim, k
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return err("need 1 <= min_objects <= max_objects".into());
        }
        if self.max_objects > k {
            return err(format!(
                "max_objects ({}) exceeds classes ({}); each object has its own class",
                self.max_objects, k
            ));
        }
        if !(self.min_object_side >= 1.0 && self.min_object_side <= self.max_object_side) {
            return err("need 1 <= min_object_side <= max_object_side".into());
        }
        if self.max_object_side > self.canvas[0].min(self.canvas[1]) {
            return err(format!(
                "canvas {:?} too small for objects up to {} px",
                self.canvas, self.max_object_side
            ));
        }
        if !(self.min_background_side >= 1.0
            && self.min_background_side <= self.max_background_side
            && self.max_background_side <= self.canvas[0].min(self.canvas[1]))
        {
            return err("background sides must satisfy 1 <= min <= max <= canvas".into());
        }
        if self.proposals_per_object == 0 {
            return err("proposals_per_object must be at least 1".into());
        }
        if self.proposals_per_scene < self.max_objects * self.proposals_per_object {
            return err(format!(
                "proposals_per_scene ({}) below max_objects * proposals_per_object ({})",
                self.proposals_per_scene,
                self.max_objects * self.proposals_per_object
            ));
        }
        if self.cooccurrence.len() != k * k {
            return err(format!("cooccurrence needs {} entries", k * k));
        }
        for i in 0..k {
            for j in 0..k {
                let v = self.cooccurrence[i * k + j];
                if !(0.0..=1.0).contains(&v) {
                    return err(format!("cooccurrence[{}][{}] = {} outside [0,1]", i, j, v));
                }
                if v != self.cooccurrence[j * k + i] {
                    return err("cooccurrence must be symmetric".into());
                }
            }
        }
        if !(self.noise_sigma >= 0.0 && self.jitter >= 0.0 && self.context_weight >= 0.0) {
            return err("noise_sigma, jitter and context_weight must be >= 0".into());
        }
        Ok(())
    }
}

/// Orthonormal class prototypes in `R^D` (Gram–Schmidt on Gaussian draws).
fn prototypes(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        for p in &out {
            let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            out.push(v);
        }
    }
    out
}

fn sample_classes(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Vec<usize> {
    let k = cfg.classes;
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut chosen = vec![rng.random_range(0..k)];
    while chosen.len() < count {
        let weights: Vec<f64> = (0..k)
            .map(|j| {
                if chosen.contains(&j) {
                    0.0
                } else {
                    chosen.iter().map(|&c| cfg.cooccurrence[c * k + j]).sum::<f64>()
                        / chosen.len() as f64
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = None;
            for (j, w) in weights.iter().enumerate() {
                if *w > 0.0 {
                    pick = Some(j);
                    if u < *w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            let free: Vec<usize> = (0..k).filter(|j| !chosen.contains(j)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
    }
    chosen
}

fn clip_box(x1: f64, y1: f64, x2: f64, y2: f64, canvas: [f64; 2]) -> Option<BBox> {
    let b = BBox {
        x1: x1.clamp(0.0, canvas[0]),
        y1: y1.clamp(0.0, canvas[1]),
        x2: x2.clamp(0.0, canvas[0]),
        y2: y2.clamp(0.0, canvas[1]),
    };
    (b.width() >= 2.0 && b.height() >= 2.0).then_some(b)
}

fn place_object(rng: &mut ChaCha8Rng, cfg: &SceneConfig, others: &[BBox]) -> BBox {
    let mut last = None;
    for _ in 0..MAX_TRIES {
        let w = rng.random_range(cfg.min_object_side..=cfg.max_object_side);
        let h = rng.random_range(cfg.min_object_side..=cfg.max_object_side);
        let x1 = rng.random_range(0.0..=cfg.canvas[0] - w);
        let y1 = rng.random_range(0.0..=cfg.canvas[1] - h);
        let b = BBox {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        };
        if others.iter().all(|o| o.iou(&b) < 0.3) {
            return b;
        }
        last = Some(b);
    }
    last.expect("at least one attempt")
}

fn tight_proposal(rng: &mut ChaCha8Rng, cfg: &SceneConfig, gt: &BBox) -> BBox {
    if cfg.jitter == 0.0 {
        return *gt;
    }
    let nx = Normal::new(0.0, cfg.jitter * gt.width()).expect("finite jitter");
    let ny = Normal::new(0.0, cfg.jitter * gt.height()).expect("finite jitter");
    for _ in 0..MAX_TRIES {
        let cand = clip_box(
            gt.x1 + nx.sample(rng),
            gt.y1 + ny.sample(rng),
            gt.x2 + nx.sample(rng),
            gt.y2 + ny.sample(rng),
            cfg.canvas,
        );
        if let Some(b) = cand {
            if b.iou(gt) > 0.5 {
                return b;
            }
        }
    }
    *gt
}

fn loose_proposal(rng: &mut ChaCha8Rng, cfg: &SceneConfig, gt: &BBox) -> BBox {
    let (w, h) = (gt.width(), gt.height());
    for _ in 0..MAX_TRIES {
        let cand = if rng.random_bool(0.6) {
            // A part of the object.
            let fw = rng.random_range(0.35..0.9) * w;
            let fh = rng.random_range(0.35..0.9) * h;
            let x1 = gt.x1 + rng.random_range(0.0..=w - fw);
            let y1 = gt.y1 + rng.random_range(0.0..=h - fh);
            clip_box(x1, y1, x1 + fw, y1 + fh, cfg.canvas)
        } else {
            // The object plus surroundings.
            let s = rng.random_range(1.3..2.0);
            let cx = (gt.x1 + gt.x2) / 2.0 + rng.random_range(-0.2..0.2) * w;
            let cy = (gt.y1 + gt.y2) / 2.0 + rng.random_range(-0.2..0.2) * h;
            clip_box(
                cx - s * w / 2.0,
                cy - s * h / 2.0,
                cx + s * w / 2.0,
                cy + s * h / 2.0,
                cfg.canvas,
            )
        };
        if let Some(b) = cand {
            let iou = b.iou(gt);
            if (LOOSE_IOU.0..=LOOSE_IOU.1).contains(&iou) {
                return b;
            }
        }
    }
    // Left part covering 40% of the width: IoU exactly 0.4.
    BBox {
        x1: gt.x1,
        y1: gt.y1,
        x2: gt.x1 + 0.4 * w,
        y2: gt.y2,
    }
}

fn background_proposal(rng: &mut ChaCha8Rng, cfg: &SceneConfig, objects: &[BBox]) -> BBox {
    let mut last = None;
    for _ in 0..MAX_TRIES {
        let w = rng.random_range(cfg.min_background_side..=cfg.max_background_side);
        let h = rng.random_range(cfg.min_background_side..=cfg.max_background_side);
        let x1 = rng.random_range(0.0..=cfg.canvas[0] - w);
        let y1 = rng.random_range(0.0..=cfg.canvas[1] - h);
        let b = BBox {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        };
        if objects.iter().all(|o| o.iou(&b) < BACKGROUND_MAX_IOU) {
            return b;
        }
        last = Some(b);
    }
    last.expect("at least one attempt")
}

fn mean_of(protos: &[Vec<f64>], classes: impl Iterator<Item = usize>, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for c in classes {
        acc.iter_mut().zip(&protos[c]).for_each(|(a, p)| *a += p);
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

/// Generates `n_scenes` bags with their ground truth. Deterministic in
/// `cfg.seed`.
pub fn generate_dataset(cfg: &SceneConfig, n_scenes: usize) -> Result<Dataset> {
    generate_with_owners(cfg, n_scenes).map(|(ds, _)| ds)
}

/// Also returns, per scene, the index of the object each proposal was drawn
/// from (`None` for background).
fn generate_with_owners(
    cfg: &SceneConfig,
    n_scenes: usize,
) -> Result<(Dataset, Vec<Vec<Option<usize>>>)> {
    cfg.validate()?;
    let mut owners_all = Vec::with_capacity(n_scenes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k, d) = (cfg.classes, cfg.feature_dim);
    let protos = prototypes(&mut rng, k, d);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut dataset = Dataset::default();
    for scene in 0..n_scenes {
        let classes = sample_classes(&mut rng, cfg);
        let mut objects: Vec<BBox> = Vec::with_capacity(classes.len());
        for _ in &classes {
            let b = place_object(&mut rng, cfg, &objects);
            objects.push(b);
        }

        // (box, feature) pairs.
        let mut rows: Vec<(BBox, Vec<f64>, Option<usize>)> =
            Vec::with_capacity(cfg.proposals_per_scene);
        for (o, (&class, gt)) in classes.iter().zip(&objects).enumerate() {
            let context = mean_of(
                &protos,
                classes.iter().enumerate().filter(|&(j, _)| j != o).map(|(_, &c)| c),
                d,
            );
            for p in 0..cfg.proposals_per_object {
                let b = if p == 0 {
                    tight_proposal(&mut rng, cfg, gt)
                } else {
                    loose_proposal(&mut rng, cfg, gt)
                };
                let q = b.iou(gt);
                let f = (0..d)
                    .map(|j| q * protos[class][j] + cfg.context_weight * context[j] + noise.sample(&mut rng))
                    .collect();
                rows.push((b, f, Some(o)));
            }
        }
        let scene_context = mean_of(&protos, classes.iter().copied(), d);
        while rows.len() < cfg.proposals_per_scene {
            let b = background_proposal(&mut rng, cfg, &objects);
            let f = (0..d)
                .map(|j| cfg.context_weight * scene_context[j] + noise.sample(&mut rng))
                .collect();
            rows.push((b, f, None));
        }
        rows.shuffle(&mut rng);

        let mut tags = vec![0u8; k];
        classes.iter().for_each(|&c| tags[c] = 1);
        let image_id = format!("scene_{:05}", scene);
        let n = rows.len();
        let mut data = Vec::with_capacity(n * d);
        let mut proposals = Vec::with_capacity(n);
        let mut owners = Vec::with_capacity(n);
        for (b, f, owner) in rows {
            proposals.push(b);
            data.extend(f);
            owners.push(owner);
        }
        owners_all.push(owners);
        dataset.bags.push(Bag {
            image_id: image_id.clone(),
            canvas: cfg.canvas,
            proposals,
            features: Tensor::matrix(n, d, data)?,
            tags,
        });
        dataset.ground_truth.push(GroundTruth {
            image_id,
            objects: classes
                .iter()
                .zip(&objects)
                .map(|(&class, &bbox)| GtObject { bbox, class })
                .collect(),
        });
    }
    Ok((dataset, owners_all))
}
