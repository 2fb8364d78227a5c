//! Semantic-wise prediction branch.
//!
//! Instances are projected into a `K`-dimensional category space. The
//! Pearson correlation between those dimensions, estimated over the bag's
//! instances, mixes the embedding into pseudo-label scores. Embeddings are
//! pulled toward per-class centers by a cosine loss, and the centers track
//! their assigned embeddings with an exponential moving average.

use crate::error::{Error, Result};
use crate::numerics::{correlation_with_mask, Graph, Tensor, Var};

pub const DEFAULT_CENTER_RATE: f64 = 1e-4;

/// `W_sem`, shape `d × D` with `d = K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticProjector {
    pub w_sem: Tensor,
}

impl SemanticProjector {
    pub fn new(w_sem: Tensor, num_classes: usize) -> Result<Self> {
        if w_sem.shape().len() != 2 || w_sem.rows() != num_classes {
            return Err(Error::dim(
                "SemanticProjector",
                format!("expected {} rows, got shape {:?}", num_classes, w_sem.shape()),
            ));
        }
        if !w_sem.is_finite() {
            return Err(Error::NonFinite("SemanticProjector"));
        }
        Ok(Self { w_sem })
    }

    pub fn dim(&self) -> usize {
        self.w_sem.rows()
    }
}

/// Per-instance scores `ŷᵢ = corr_sem · zᵢ` and their argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Pseudo {
    /// `|B| × d`
    pub scores: Tensor,
    pub labels: Vec<usize>,
}

/// Graph nodes produced by [`semantic_forward`].
#[derive(Debug, Clone, Copy)]
pub struct SemanticForward {
    /// `|B| × d`
    pub z: Var,
    /// `d × d`
    pub corr_sem: Var,
    /// `|B| × d`, row `i` is `corr_sem · zᵢ`.
    pub y_hat: Var,
}

pub fn project(features: &Tensor, proj: &SemanticProjector) -> Result<Tensor> {
    features.matmul(&proj.w_sem.transpose())
}

/// Population covariance `(1/n) Σ (a_q − ā)(b_q − b̄)`.
pub fn semantic_covariance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("semantic_covariance", format!("{} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("covariance needs 2 samples, got {}", n)));
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    Ok(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n as f64)
}

/// Pearson correlation between the columns of `z`. Columns without
/// variance get the matching identity row and column.
pub fn correlation_matrix(z: &Tensor) -> Result<Tensor> {
    correlation_with_mask(z).map(|(c, _)| c)
}

/// Argmax of each score row, lowest index on ties. With `tags`, only
/// positive classes compete.
pub fn pseudo_labels(corr_sem: &Tensor, z: &Tensor, tags: Option<&[u8]>) -> Result<Pseudo> {
    let scores = z.matmul(corr_sem)?;
    let d = scores.cols();
    if let Some(t) = tags {
        if t.len() != d {
            return Err(Error::dim("pseudo_labels", format!("{} tags for {} dims", t.len(), d)));
        }
        if !t.contains(&1) {
            return Err(Error::Contract("tag-masked pseudo labels need a positive tag".into()));
        }
    }
    let allowed = |k: usize| tags.is_none_or(|t| t[k] == 1);
    let labels = (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            (0..d)
                .filter(|&k| allowed(k))
                .fold(None::<usize>, |best, k| match best {
                    Some(b) if row[b] >= row[k] => Some(b),
                    _ => Some(k),
                })
                .unwrap_or(0)
        })
        .collect();
    Ok(Pseudo { scores, labels })
}

/// Embeds the bag and mixes the embedding through its correlation matrix,
/// or through `fixed` when given (held constant). A single-instance bag has
/// no correlation estimate and uses the identity.
pub fn semantic_forward(g: &mut Graph, features: Var, w_sem: Var, fixed: Option<&Tensor>) -> Result<SemanticForward> {
    let wt = g.transpose(w_sem)?;
    let z = g.matmul(features, wt)?;
    let (n, d) = g.value(z).dims();
    if n == 0 {
        return Err(Error::EmptyBag("no instances".into()));
    }
    let corr_sem = if let Some(c) = fixed {
        if c.shape() != [d, d] {
            return Err(Error::dim("semantic_forward", format!("fixed correlation {:?} for d = {}", c.shape(), d)));
        }
        g.constant(c.clone())?
    } else if n < 2 {
        g.constant(Tensor::identity(d))?
    } else {
        g.correlation(z)?
    };
    let y_hat = g.matmul(z, corr_sem)?;
    Ok(SemanticForward { z, corr_sem, y_hat })
}

/// `(1/|B|) Σᵢ (1 − cos(zᵢ, c_{ŷᵢ}))`, centers held constant.
pub fn semantic_loss(g: &mut Graph, z: Var, labels: &[usize], centers: &Tensor) -> Result<Var> {
    let (n, d) = g.value(z).dims();
    if labels.len() != n || centers.cols() != d {
        return Err(Error::dim(
            "semantic_loss",
            format!(
                "{} labels, centers {:?}, embeddings {:?}",
                labels.len(),
                centers.shape(),
                g.value(z).shape()
            ),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= centers.rows()) {
        return Err(Error::Contract(format!("pseudo label {} has no center", bad)));
    }
    let assigned = Tensor::from_rows(&labels.iter().map(|&l| centers.row(l)).collect::<Vec<_>>())?;
    let c = g.constant(assigned.reshape(vec![n, d])?)?;
    let cos = g.cosine_rows(z, c)?;
    let total = g.sum(cos)?;
    g.affine(total, -1.0 / n as f64, 1.0)
}

/// Moves each instance's assigned center a fraction `theta` toward it, in
/// bag order.
pub fn update_centers(centers: &Tensor, z: &Tensor, labels: &[usize], theta: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Parameter(format!("center rate must be in [0,1], got {}", theta)));
    }
    if labels.len() != z.rows() || centers.cols() != z.cols() {
        return Err(Error::dim(
            "update_centers",
            format!("{} labels, centers {:?}, embeddings {:?}", labels.len(), centers.shape(), z.shape()),
        ));
    }
    let mut out = centers.clone();
    for (i, &l) in labels.iter().enumerate() {
        if l >= out.rows() {
            return Err(Error::Contract(format!("pseudo label {} has no center", l)));
        }
        let zi = z.row(i);
        for (c, &v) in out.row_mut(l).iter_mut().zip(zi) {
            *c += theta * (v - *c);
        }
    }
    Ok(out)
}

/// Dataset-level correlation estimate: moves `running` a fraction `rate`
/// toward the bag's correlation matrix.
pub fn blend_correlation(running: &Tensor, bag_corr: &Tensor, rate: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Parameter(format!("correlation rate must be in [0,1], got {}", rate)));
    }
    running.zip_map(bag_corr, |r, b| r + rate * (b - r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn project_examples() {
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]).unwrap();
        let zero = SemanticProjector::new(Tensor::zeros(&[2, 3]), 2).unwrap();
        assert!(project(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let id = SemanticProjector::new(Tensor::identity(3), 3).unwrap();
        assert_eq!(project(&x, &id).unwrap(), x);
        let w = Tensor::from_rows(&[[1.0, 0.0, -1.0], [0.5, 2.0, 1.0]]).unwrap();
        let p = project(&x, &SemanticProjector::new(w, 2).unwrap()).unwrap();
        // Row 0: 1 − 3 = −2 and 0.5 + 4 + 3 = 7.5; row 1: −1 − 2 = −3 and −0.5 + 1 + 2 = 2.5.
        assert_eq!(p.data(), &[-2.0, 7.5, -3.0, 2.5]);
        assert!(SemanticProjector::new(Tensor::zeros(&[3, 3]), 2).is_err());
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(semantic_covariance(&[2.0, 2.0, 2.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        let v = semantic_covariance(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((v - 4.0 / 3.0).abs() < 1e-15);
        let a = [0.3, -1.0, 2.5, 0.0];
        let var = semantic_covariance(&a, &a).unwrap();
        let expanded = a.iter().map(|x| x * x).sum::<f64>() / 4.0 - (a.iter().sum::<f64>() / 4.0).powi(2);
        assert!((var - expanded).abs() < 1e-12 && var >= 0.0);
        assert!(matches!(semantic_covariance(&[1.0], &[1.0]), Err(Error::Degenerate(_))));
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
    }

    #[test]
    fn correlation_matches_pearson_oracle() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = rand_tensor(&mut rng, 6, 3);
            let c = correlation_matrix(&z).unwrap();
            for p in 0..3 {
                for q in 0..3 {
                    let want = pearson(&z.column(p), &z.column(q));
                    assert!((c.get(p, q) - want).abs() < 1e-10);
                    assert_eq!(c.get(p, q), c.get(q, p));
                }
            }
        }
    }

    #[test]
    fn correlation_perfect_and_anti() {
        let z = Tensor::from_rows(&[[1.0, 1.0, -1.0], [2.0, 2.0, -2.0], [0.5, 0.5, -0.5]]).unwrap();
        let c = correlation_matrix(&z).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((c.get(0, 2) + 1.0).abs() < 1e-12);
        let flat = Tensor::from_rows(&[[1.0, 3.0], [2.0, 3.0]]).unwrap();
        let c = correlation_matrix(&flat).unwrap();
        assert_eq!(c.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            correlation_matrix(&Tensor::zeros(&[1, 2])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn pseudo_label_examples() {
        let z = Tensor::from_rows(&[[0.0, 1.0, 0.0], [0.4, 0.3, 0.1]]).unwrap();
        let p = pseudo_labels(&Tensor::identity(3), &z, None).unwrap();
        assert_eq!(p.scores, z);
        assert_eq!(p.labels, vec![1, 0]);

        // A strong (1, 2) coupling lifts class 2 past the raw argmax 0.
        let mut c = Tensor::identity(3);
        c.set(1, 2, 0.9);
        c.set(2, 1, 0.9);
        let z = Tensor::from_rows(&[[0.5, 0.2, 0.45]]).unwrap();
        assert_eq!(pseudo_labels(&Tensor::identity(3), &z, None).unwrap().labels, vec![0]);
        let p = pseudo_labels(&c, &z, None).unwrap();
        let want = [0.5, 0.2 + 0.9 * 0.45, 0.9 * 0.2 + 0.45];
        for k in 0..3 {
            assert!((p.scores.get(0, k) - want[k]).abs() < 1e-15);
        }
        assert_eq!(p.labels, vec![2]);

        let tie = Tensor::from_rows(&[[0.2, 0.2]]).unwrap();
        assert_eq!(pseudo_labels(&Tensor::identity(2), &tie, None).unwrap().labels, vec![0]);
    }

    #[test]
    fn tag_mask_restricts_labels() {
        let z = Tensor::from_rows(&[[0.9, 0.1, 0.3], [0.0, 0.0, 0.0]]).unwrap();
        let p = pseudo_labels(&Tensor::identity(3), &z, Some(&[0, 1, 1])).unwrap();
        assert_eq!(p.labels, vec![2, 1]);
        assert!(pseudo_labels(&Tensor::identity(3), &z, Some(&[0, 0, 0])).is_err());
    }

    fn loss_value(z: &Tensor, labels: &[usize], centers: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone())?;
        let l = semantic_loss(&mut g, zv, labels, centers)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn semantic_loss_examples() {
        let centers = Tensor::identity(2);
        let parallel = Tensor::from_rows(&[[3.0, 0.0], [0.0, 0.5]]).unwrap();
        assert!(loss_value(&parallel, &[0, 1], &centers).unwrap().abs() < 1e-15);
        assert!((loss_value(&parallel, &[1, 0], &centers).unwrap() - 1.0).abs() < 1e-15);

        let z = Tensor::from_rows(&[[1.0, 1.0], [-2.0, 1.0]]).unwrap();
        let want = ((1.0 - 1.0 / 2f64.sqrt()) + (1.0 - 1.0 / 5f64.sqrt())) / 2.0;
        assert!((loss_value(&z, &[0, 1], &centers).unwrap() - want).abs() < 1e-12);

        let dead = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(loss_value(&z, &[0, 0], &dead), Err(Error::Degenerate(_))));
    }

    #[test]
    fn update_center_examples() {
        let c = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let z = Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(update_centers(&c, &z, &[0, 0], 0.0).unwrap(), c);
        let full = update_centers(&c, &z, &[0, 0], 1.0).unwrap();
        assert_eq!(full.row(0), &[5.0, 6.0]);
        assert_eq!(full.row(1), c.row(1));
        let half = update_centers(&c, &z.reshape(vec![2, 2]).unwrap(), &[1, 0], 0.5).unwrap();
        assert_eq!(half.row(1), &[1.5, 2.5]);
        assert_eq!(half.row(0), &[3.0, 3.0]);
        assert!(matches!(update_centers(&c, &z, &[0, 1], 1.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn single_instance_bag_uses_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, -2.0]]).unwrap()).unwrap();
        let w = g.param(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap()).unwrap();
        let f = semantic_forward(&mut g, x, w, None).unwrap();
        assert_eq!(g.value(f.corr_sem), &Tensor::identity(3));
        assert_eq!(g.value(f.y_hat).data(), &[1.0, -2.0, -1.0]);
    }

    #[test]
    fn fixed_correlation_is_used_verbatim() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 1.0]]).unwrap()).unwrap();
        let w = g.param(Tensor::identity(2)).unwrap();
        let c = Tensor::from_rows(&[[1.0, 0.5], [0.5, 1.0]]).unwrap();
        let f = semantic_forward(&mut g, x, w, Some(&c)).unwrap();
        assert_eq!(g.value(f.corr_sem), &c);
        assert_eq!(g.value(f.y_hat).data(), &[1.0, 0.5, 0.5, 1.0, 2.5, 2.0]);
        assert!(semantic_forward(&mut g, x, w, Some(&Tensor::identity(3))).is_err());
    }

    #[test]
    fn blend_examples() {
        let r = Tensor::identity(2);
        let b = Tensor::from_rows(&[[1.0, -0.5], [-0.5, 1.0]]).unwrap();
        assert_eq!(blend_correlation(&r, &b, 0.0).unwrap(), r);
        assert_eq!(blend_correlation(&r, &b, 1.0).unwrap(), b);
        assert_eq!(blend_correlation(&r, &b, 0.5).unwrap().data(), &[1.0, -0.25, -0.25, 1.0]);
        assert!(blend_correlation(&r, &b, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn loss_in_range(vals in prop::collection::vec(-5.0f64..5.0, 12), seed in 0u64..1000) {
            let z = Tensor::matrix(4, 3, vals).unwrap();
            prop_assume!((0..4).all(|r| z.row(r).iter().any(|v| v.abs() > 1e-6)));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centers = rand_tensor(&mut rng, 3, 3);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let v = loss_value(&z, &labels, &centers).unwrap();
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&v));
        }

        #[test]
        fn correlation_is_symmetric_with_unit_diagonal(vals in prop::collection::vec(-3.0f64..3.0, 15)) {
            let z = Tensor::matrix(5, 3, vals).unwrap();
            let c = correlation_matrix(&z).unwrap();
            for p in 0..3 {
                prop_assert!((c.get(p, p) - 1.0).abs() < 1e-9);
                for q in 0..3 {
                    prop_assert_eq!(c.get(p, q), c.get(q, p));
                    prop_assert!(c.get(p, q).abs() <= 1.0 + 1e-9);
                }
            }
        }

        #[test]
        fn center_update_contracts(c0 in prop::collection::vec(-2.0f64..2.0, 3),
                                   z0 in prop::collection::vec(-2.0f64..2.0, 3),
                                   theta in 0.0f64..=1.0) {
            let c = Tensor::matrix(1, 3, c0).unwrap();
            let z = Tensor::matrix(1, 3, z0).unwrap();
            let out = update_centers(&c, &z, &[0], theta).unwrap();
            let dist = |a: &[f64]| a.iter().zip(z.row(0)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!((dist(out.row(0)) - (1.0 - theta) * dist(c.row(0))).abs() < 1e-12);
        }
    }
}
