//! Interactive graph contrastive learning.
//!
//! Each bag gets two graphs: an instance graph linking overlapping
//! proposals and a semantic graph linking cosine nearest neighbours in the
//! embedding space. Two-layer GCNs map visual features, one-hot instance
//! labels, semantic embeddings and semantic scores to unit-norm embeddings,
//! which are contrasted across branches with an InfoNCE objective.

use crate::datamodel::BBox;
use crate::error::{Error, Result};
use crate::numerics::{cosine, Graph, Tensor, Var};

pub const DEFAULT_IOU_EDGE: f64 = 0.3;
pub const DEFAULT_KNN: usize = 5;
pub const DEFAULT_TAU: f64 = 5.0;

/// `D^{-1/2} (A + I) D^{-1/2}` for a binary adjacency `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAdjacency {
    pub a_hat: Tensor,
}

impl GraphAdjacency {
    /// Normalizes a symmetric edge indicator (diagonal ignored).
    pub fn from_edges(edges: &[Vec<bool>]) -> Self {
        let n = edges.len();
        let mut a = Tensor::identity(n);
        for i in 0..n {
            for j in 0..n {
                if i != j && (edges[i][j] || edges[j][i]) {
                    a.set(i, j, 1.0);
                }
            }
        }
        let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>()).collect();
        for i in 0..n {
            for j in 0..n {
                let v = a.get(i, j);
                if v != 0.0 {
                    a.set(i, j, v / (deg[i] * deg[j]).sqrt());
                }
            }
        }
        Self { a_hat: a }
    }

    pub fn len(&self) -> usize {
        self.a_hat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.a_hat.rows() == 0
    }
}

/// Edges between proposals whose IoU exceeds `tau_iou`.
pub fn build_instance_graph(boxes: &[BBox], tau_iou: f64) -> Result<GraphAdjacency> {
    if boxes.is_empty() {
        return Err(Error::EmptyBag("instance graph of an empty bag".into()));
    }
    let n = boxes.len();
    let edges: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| i != j && boxes[i].iou(&boxes[j]) > tau_iou).collect())
        .collect();
    Ok(GraphAdjacency::from_edges(&edges))
}

/// Union of every row's `k` most cosine-similar rows (ties to the lower
/// index). Zero rows have similarity 0 to everything.
pub fn build_semantic_graph(z: &Tensor, k: usize) -> Result<GraphAdjacency> {
    let n = z.rows();
    if n == 0 {
        return Err(Error::EmptyBag("semantic graph of an empty bag".into()));
    }
    let sim = |i: usize, j: usize| cosine(z.row(i), z.row(j)).unwrap_or(0.0);
    let mut edges = vec![vec![false; n]; n];
    for i in 0..n {
        let mut others: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, sim(i, j))).collect();
        others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, _) in others.iter().take(k) {
            edges[i][j] = true;
            edges[j][i] = true;
        }
    }
    Ok(GraphAdjacency::from_edges(&edges))
}

/// Two GCN layers: `W1` is `in × h`, `W2` is `h × e`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnProjector {
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct GcnVars {
    pub w1: Var,
    pub w2: Var,
}

impl GcnVars {
    pub fn params(g: &mut Graph, p: &GcnProjector) -> Result<Self> {
        Ok(Self {
            w1: g.param(p.w1.clone())?,
            w2: g.param(p.w2.clone())?,
        })
    }

    pub fn constants(g: &mut Graph, p: &GcnProjector) -> Result<Self> {
        Ok(Self {
            w1: g.constant(p.w1.clone())?,
            w2: g.constant(p.w2.clone())?,
        })
    }
}

/// The four GCNs: visual features and one-hot instance labels on the
/// instance graph, semantic embeddings and semantic scores on the semantic
/// graph.
#[derive(Debug, Clone, PartialEq)]
pub struct IgclProjectors {
    pub f_ins: GcnProjector,
    pub f_ins_label: GcnProjector,
    pub f_sem: GcnProjector,
    pub f_sem_score: GcnProjector,
}

#[derive(Debug, Clone, Copy)]
pub struct IgclVars {
    pub f_ins: GcnVars,
    pub f_ins_label: GcnVars,
    pub f_sem: GcnVars,
    pub f_sem_score: GcnVars,
}

impl IgclVars {
    pub fn params(g: &mut Graph, p: &IgclProjectors) -> Result<Self> {
        Ok(Self {
            f_ins: GcnVars::params(g, &p.f_ins)?,
            f_ins_label: GcnVars::params(g, &p.f_ins_label)?,
            f_sem: GcnVars::params(g, &p.f_sem)?,
            f_sem_score: GcnVars::params(g, &p.f_sem_score)?,
        })
    }

    fn constants(g: &mut Graph, p: &IgclProjectors) -> Result<Self> {
        Ok(Self {
            f_ins: GcnVars::constants(g, &p.f_ins)?,
            f_ins_label: GcnVars::constants(g, &p.f_ins_label)?,
            f_sem: GcnVars::constants(g, &p.f_sem)?,
            f_sem_score: GcnVars::constants(g, &p.f_sem_score)?,
        })
    }
}

/// Unit-normalized `Â · relu(Â · H · W1) · W2` on the graph.
pub fn gcn_node(g: &mut Graph, a_hat: Var, h: Var, w: &GcnVars) -> Result<Var> {
    let hw = g.matmul(h, w.w1)?;
    let first = g.matmul(a_hat, hw)?;
    let act = g.relu(first)?;
    let prop = g.matmul(a_hat, act)?;
    let out = g.matmul(prop, w.w2)?;
    g.normalize_rows(out)
}

/// Tensor-level [`gcn_node`]. Rows with no signal come out as zeros.
pub fn gcn_forward(adj: &GraphAdjacency, h: &Tensor, proj: &GcnProjector) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(adj.a_hat.clone())?;
    let hv = g.constant(h.clone())?;
    let w = GcnVars::constants(&mut g, proj)?;
    let out = gcn_node(&mut g, a, hv, &w)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub u: Tensor,
    pub u_label: Tensor,
    pub v: Tensor,
    pub v_score: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub u: Var,
    pub u_label: Var,
    pub v: Var,
    pub v_score: Var,
}

/// `(U, U′)` from visual features and one-hot instance labels.
pub fn instance_embeddings(
    g: &mut Graph,
    adj: &GraphAdjacency,
    features: Var,
    one_hot: Var,
    w: &IgclVars,
) -> Result<(Var, Var)> {
    check_rows("instance_embeddings", adj, &[g.value(features), g.value(one_hot)])?;
    let a = g.constant(adj.a_hat.clone())?;
    Ok((gcn_node(g, a, features, &w.f_ins)?, gcn_node(g, a, one_hot, &w.f_ins_label)?))
}

/// `(V, V′)` from semantic embeddings and semantic scores.
pub fn semantic_embeddings(
    g: &mut Graph,
    adj: &GraphAdjacency,
    z: Var,
    scores: Var,
    w: &IgclVars,
) -> Result<(Var, Var)> {
    check_rows("semantic_embeddings", adj, &[g.value(z), g.value(scores)])?;
    let a = g.constant(adj.a_hat.clone())?;
    Ok((gcn_node(g, a, z, &w.f_sem)?, gcn_node(g, a, scores, &w.f_sem_score)?))
}

fn check_rows(op: &'static str, adj: &GraphAdjacency, inputs: &[&Tensor]) -> Result<()> {
    for t in inputs {
        if t.rows() != adj.len() {
            return Err(Error::dim(op, format!("{} rows on a {}-node graph", t.rows(), adj.len())));
        }
    }
    Ok(())
}

/// All four embeddings for one bag, treating every input as constant.
#[allow(clippy::too_many_arguments)]
pub fn compute_embeddings(
    boxes: &[BBox],
    features: &Tensor,
    one_hot: &Tensor,
    z: &Tensor,
    scores: &Tensor,
    proj: &IgclProjectors,
    tau_iou: f64,
    knn: usize,
) -> Result<Embeddings> {
    let inst = build_instance_graph(boxes, tau_iou)?;
    let sem = build_semantic_graph(z, knn)?;
    let mut g = Graph::new();
    let w = IgclVars::constants(&mut g, proj)?;
    let x = g.constant(features.clone())?;
    let oh = g.constant(one_hot.clone())?;
    let zv = g.constant(z.clone())?;
    let sv = g.constant(scores.clone())?;
    let (u, u_label) = instance_embeddings(&mut g, &inst, x, oh, &w)?;
    let (v, v_score) = semantic_embeddings(&mut g, &sem, zv, sv, &w)?;
    Ok(Embeddings {
        u: g.value(u).clone(),
        u_label: g.value(u_label).clone(),
        v: g.value(v).clone(),
        v_score: g.value(v_score).clone(),
    })
}

/// `−(1/n) Σᵢ log softmax_j(τ · xᵢ·yⱼ)[i]`.
pub fn info_nce(g: &mut Graph, x: Var, y: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("tau must be > 0, got {}", tau)));
    }
    let (n, _) = g.value(x).dims();
    if g.value(y).dims() != g.value(x).dims() {
        return Err(Error::dim(
            "info_nce",
            format!("{:?} vs {:?}", g.value(x).shape(), g.value(y).shape()),
        ));
    }
    if n == 0 {
        return Err(Error::EmptyBag("info_nce over no rows".into()));
    }
    let yt = g.transpose(y)?;
    let sim = g.matmul(x, yt)?;
    let logits = g.affine(sim, tau, 0.0)?;
    let log_p = g.log_softmax_rows(logits)?;
    let diag = g.gather(log_p, (0..n).map(|i| (i, i)).collect())?;
    let total = g.sum(diag)?;
    g.affine(total, -1.0 / n as f64, 0.0)
}

/// Cross-branch contrast: `(U, V)` and `(U′, V′)`.
pub fn igcl_loss(g: &mut Graph, e: &EmbeddingVars, tau: f64) -> Result<Var> {
    let a = info_nce(g, e.u, e.v, tau)?;
    let b = info_nce(g, e.u_label, e.v_score, tau)?;
    g.add(a, b)
}

/// Within-branch contrast: `(U, U′)` and `(V, V′)`.
pub fn independent_gcl_loss(g: &mut Graph, e: &EmbeddingVars, tau: f64) -> Result<Var> {
    let a = info_nce(g, e.u, e.u_label, tau)?;
    let b = info_nce(g, e.v, e.v_score, tau)?;
    g.add(a, b)
}
