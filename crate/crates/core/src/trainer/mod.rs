//! Joint training of both branches and the contrastive heads, SGD with
//! momentum, checkpointing and test-time decoding.

mod checkpoint;
mod infer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use infer::{fused_scores, infer, nms};

pub use crate::evalmetrics::Detection;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{Bag, Dataset};
use crate::error::{Error, Result};
use crate::igcl::{
    build_instance_graph, build_semantic_graph, info_nce, instance_embeddings, semantic_embeddings,
    GcnProjector, GcnVars, GraphAdjacency, IgclProjectors, IgclVars,
};
use crate::instance_branch::{
    approx_labels, instance_forward, instance_loss, ApproxLabels, DetectionHead, HeadVars,
};
use crate::numerics::{Graph, Tensor, Var};
use crate::semantic_branch::{
    blend_correlation, correlation_matrix, pseudo_labels, semantic_forward, semantic_loss, update_centers, Pseudo,
};

/// Which modules take part: M1 instance branch, M2 semantic branch, M3
/// within-branch contrast, M4 cross-branch contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleMask {
    pub m1: bool,
    pub m2: bool,
    pub m3: bool,
    pub m4: bool,
}

impl ModuleMask {
    pub const FULL: ModuleMask = ModuleMask {
        m1: true,
        m2: true,
        m3: false,
        m4: true,
    };

    /// Sub-methods `A`..`F` of the module ablation.
    pub fn sub_method(name: char) -> Result<Self> {
        let (m1, m2, m3, m4) = match name.to_ascii_uppercase() {
            'A' => (true, false, false, false),
            'B' => (false, true, false, false),
            'C' => (true, false, true, false),
            'D' => (false, true, true, false),
            'E' => (true, true, true, false),
            'F' => (true, true, false, true),
            other => return Err(Error::Config(format!("unknown sub-method {:?}", other))),
        };
        Ok(Self { m1, m2, m3, m4 })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.m1 && !self.m2 {
            return Err(Error::Config("module mask needs M1 or M2".into()));
        }
        if self.m3 && self.m4 {
            return Err(Error::Config("M3 and M4 cannot be combined".into()));
        }
        if self.m4 && !(self.m1 && self.m2) {
            return Err(Error::Config("M4 contrasts both branches and needs M1 and M2".into()));
        }
        Ok(())
    }

    pub fn contrastive(&self) -> bool {
        self.m3 || self.m4
    }

    /// Compact form such as `M1+M2+M4`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.m1, "M1"), (self.m2, "M2"), (self.m3, "M3"), (self.m4, "M4")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|&(_, s)| s)
            .collect();
        parts.join("+")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut m = ModuleMask {
            m1: false,
            m2: false,
            m3: false,
            m4: false,
        };
        for part in s.split('+').map(str::trim) {
            match part.to_ascii_uppercase().as_str() {
                "M1" => m.m1 = true,
                "M2" => m.m2 = true,
                "M3" => m.m3 = true,
                "M4" => m.m4 = true,
                _ => return Err(Error::Config(format!("bad module mask {:?}", s))),
            }
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_ins: f64,
    pub lambda_sem: f64,
    pub lambda_igcl: f64,
    /// Smooth-maximum sharpness for the diagnostic LSE pooling.
    pub lse_r: f64,
    pub gamma: f64,
    pub theta: f64,
    pub tau: f64,
    /// `(fraction of total steps, rate)`, fractions increasing from 0.
    pub lr_schedule: Vec<(f64, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mask: ModuleMask,
    pub iou_edge: f64,
    pub knn: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Weights start at `N(0, init_gain² / fan_in)`.
    pub init_gain: f64,
    pub phase_sequential: bool,
    /// Restrict semantic pseudo labels to the bag's positive tags.
    pub sem_tag_mask: bool,
    /// Rate of a dataset-level running average of the category
    /// correlation; 0 estimates it per bag.
    pub corr_sem_rate: f64,
    pub nms_iou: f64,
    pub min_score: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ins: 1.0,
            lambda_sem: 1.0,
            lambda_igcl: 1.0,
            lse_r: 4.0,
            gamma: 0.9,
            theta: crate::semantic_branch::DEFAULT_CENTER_RATE,
            tau: 5.0,
            lr_schedule: vec![(0.0, 1e-3), (0.8, 1e-4)],
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            batch_size: 1,
            seed: 0,
            mask: ModuleMask::FULL,
            iou_edge: 0.3,
            knn: 5,
            hidden: 32,
            embed: 16,
            init_gain: 1.0,
            phase_sequential: false,
            sem_tag_mask: true,
            corr_sem_rate: 0.0,
            nms_iou: 0.3,
            min_score: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda_ins", self.lambda_ins),
            ("lambda_sem", self.lambda_sem),
            ("lambda_igcl", self.lambda_igcl),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{} must be finite and >= 0, got {}", name, v));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("theta", self.theta), ("corr_sem_rate", self.corr_sem_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{} must be in [0,1], got {}", name, v));
            }
        }
        for (name, v) in [
            ("lse_r", self.lse_r),
            ("tau", self.tau),
            ("init_gain", self.init_gain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{} must be > 0, got {}", name, v));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.iou_edge) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("IoU thresholds must be in [0,1]".into());
        }
        if !(self.min_score >= 0.0) {
            return bad(format!("min_score must be >= 0, got {}", self.min_score));
        }
        if self.batch_size == 0 || self.knn == 0 || self.hidden == 0 || self.embed == 0 {
            return bad("batch_size, knn, hidden and embed must be positive".into());
        }
        match self.lr_schedule.first() {
            Some(&(f, _)) if f == 0.0 => {}
            _ => return bad("lr schedule must start at fraction 0".into()),
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return bad("lr schedule fractions must increase".into());
            }
        }
        for &(f, r) in &self.lr_schedule {
            if !(0.0..=1.0).contains(&f) || !(r > 0.0 && r.is_finite()) {
                return bad(format!("bad lr schedule entry ({}, {})", f, r));
            }
        }
        Ok(())
    }

    /// Rate in force at `step` of a run lasting `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let mut rate = self.lr_schedule[0].1;
        for &(f, r) in &self.lr_schedule {
            if step as f64 >= f * total as f64 {
                rate = r;
            }
        }
        rate
    }

    /// The same run with only one loss term weighted.
    fn only(&self, ins: bool, sem: bool, igcl: bool) -> Self {
        let mut c = self.clone();
        c.lambda_ins = if ins { self.lambda_ins } else { 0.0 };
        c.lambda_sem = if sem { self.lambda_sem } else { 0.0 };
        c.lambda_igcl = if igcl { self.lambda_igcl } else { 0.0 };
        c
    }
}

/// Every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub head: DetectionHead,
    pub w_sem: Tensor,
    pub igcl: IgclProjectors,
}

pub const PARAM_NAMES: [&str; 12] = [
    "w_cls",
    "w_det",
    "w_bg",
    "w_sem",
    "f_ins.w1",
    "f_ins.w2",
    "f_ins_label.w1",
    "f_ins_label.w2",
    "f_sem.w1",
    "f_sem.w2",
    "f_sem_score.w1",
    "f_sem_score.w2",
];

impl Params {
    /// Random initialization for `K` classes and `D` features.
    pub fn init(k: usize, d: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut draw = |r: usize, c: usize, fan_in: usize| -> Result<Tensor> {
            let dist = Normal::new(0.0, cfg.init_gain / (fan_in as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            Tensor::matrix(r, c, (0..r * c).map(|_| dist.sample(rng)).collect())
        };
        let (h, e) = (cfg.hidden, cfg.embed);
        let head = DetectionHead {
            w_cls: draw(d, k, d)?,
            w_det: draw(d, k, d)?,
            w_bg: draw(d, 1, d)?,
        };
        let w_sem = draw(k, d, d)?;
        let mut gcn = |i: usize| -> Result<GcnProjector> {
            Ok(GcnProjector {
                w1: draw(i, h, i)?,
                w2: draw(h, e, h)?,
            })
        };
        let igcl = IgclProjectors {
            f_ins: gcn(d)?,
            f_ins_label: gcn(k + 1)?,
            f_sem: gcn(k)?,
            f_sem_score: gcn(k)?,
        };
        Ok(Self { head, w_sem, igcl })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.w_cls.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        let p = &self.igcl;
        [
            &self.head.w_cls,
            &self.head.w_det,
            &self.head.w_bg,
            &self.w_sem,
            &p.f_ins.w1,
            &p.f_ins.w2,
            &p.f_ins_label.w1,
            &p.f_ins_label.w2,
            &p.f_sem.w1,
            &p.f_sem.w2,
            &p.f_sem_score.w1,
            &p.f_sem_score.w2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        let p = &mut self.igcl;
        [
            &mut self.head.w_cls,
            &mut self.head.w_det,
            &mut self.head.w_bg,
            &mut self.w_sem,
            &mut p.f_ins.w1,
            &mut p.f_ins.w2,
            &mut p.f_ins_label.w1,
            &mut p.f_ins_label.w2,
            &mut p.f_sem.w1,
            &mut p.f_sem.w2,
            &mut p.f_sem_score.w1,
            &mut p.f_sem_score.w2,
        ]
    }

    /// Whether parameter `i` (in [`PARAM_NAMES`] order) belongs to a module
    /// the mask enables.
    pub fn active(mask: &ModuleMask, i: usize) -> bool {
        match i {
            0..=2 => mask.m1,
            3 => mask.m2,
            4..=7 => mask.m1 && mask.contrastive(),
            _ => mask.m2 && mask.contrastive(),
        }
    }
}

/// Graph leaves for every parameter.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub head: HeadVars,
    pub w_sem: Var,
    pub igcl: IgclVars,
}

impl ParamVars {
    pub fn new(g: &mut Graph, p: &Params) -> Result<Self> {
        Ok(Self {
            head: HeadVars::params(g, &p.head)?,
            w_sem: g.param(p.w_sem.clone())?,
            igcl: IgclVars::params(g, &p.igcl)?,
        })
    }

    pub fn all(&self) -> [Var; 12] {
        let p = &self.igcl;
        let gv = |v: &GcnVars| [v.w1, v.w2];
        let [a, b] = gv(&p.f_ins);
        let [c, d] = gv(&p.f_ins_label);
        let [e, f] = gv(&p.f_sem);
        let [g, h] = gv(&p.f_sem_score);
        [self.head.w_cls, self.head.w_det, self.head.w_bg, self.w_sem, a, b, c, d, e, f, g, h]
    }
}

/// Non-differentiable quantities derived from a forward pass. Passing them
/// back in freezes them, which makes the loss a smooth function of the
/// parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Targets {
    pub approx: Option<ApproxLabels>,
    pub pseudo: Option<Pseudo>,
    pub inst_graph: Option<GraphAdjacency>,
    pub sem_graph: Option<GraphAdjacency>,
}

/// The composite loss of one bag and its parts.
pub struct BagLosses {
    pub graph: Graph,
    pub vars: ParamVars,
    pub total: Var,
    pub ins: Option<Var>,
    pub sem: Option<Var>,
    /// Visual-feature embedding against semantic embedding.
    pub con_sd: Option<Var>,
    /// Instance-label embedding against semantic-score embedding.
    pub con_ds: Option<Var>,
    /// Within-branch terms.
    pub gcl_ins: Option<Var>,
    pub gcl_sem: Option<Var>,
    pub z: Option<Var>,
    pub targets: Targets,
}

impl BagLosses {
    pub fn value(&self, v: Option<Var>) -> f64 {
        v.map_or(0.0, |v| self.graph.value(v).item())
    }

    pub fn contrastive_value(&self) -> f64 {
        [self.con_sd, self.con_ds, self.gcl_ins, self.gcl_sem]
            .into_iter()
            .map(|v| self.value(v))
            .sum()
    }
}

fn frozen_or<T: Clone>(frozen: Option<&Targets>, pick: impl Fn(&Targets) -> &Option<T>, make: impl FnOnce() -> Result<T>) -> Result<T> {
    match frozen.and_then(|t| pick(t).clone()) {
        Some(v) => Ok(v),
        None => make(),
    }
}

/// `λ_ins·L_ins + λ_sem·L_sem + λ_iGCL·L_iGCL` for one bag, with terms
/// outside the mask left out. `running_corr` replaces the bag's own
/// category correlation when given.
pub fn composite_loss(
    bag: &Bag,
    params: &Params,
    centers: &Tensor,
    running_corr: Option<&Tensor>,
    cfg: &TrainConfig,
    frozen: Option<&Targets>,
) -> Result<BagLosses> {
    cfg.mask.validate()?;
    bag.validate(true)?;
    let k = bag.num_classes();
    if params.num_classes() != k || params.feature_dim() != bag.feature_dim() {
        return Err(Error::Compatibility(format!(
            "parameters for K={}, D={} but bag {} has K={}, D={}",
            params.num_classes(),
            params.feature_dim(),
            bag.image_id,
            k,
            bag.feature_dim()
        )));
    }
    let mask = cfg.mask;
    let mut g = Graph::new();
    let vars = ParamVars::new(&mut g, params)?;
    let x = g.constant(bag.features.clone())?;
    let mut targets = Targets::default();

    let mut ins = None;
    if mask.m1 {
        let fwd = instance_forward(&mut g, x, &vars.head)?;
        let labels = frozen_or(frozen, |t| &t.approx, || {
            approx_labels(g.value(fwd.corr_ins), &bag.tags, cfg.gamma)
        })?;
        ins = Some(instance_loss(&mut g, &fwd, &labels, &bag.tags)?);
        targets.approx = Some(labels);
    }

    let mut sem = None;
    let mut sem_fwd = None;
    if mask.m2 {
        let fwd = semantic_forward(&mut g, x, vars.w_sem, running_corr)?;
        let pseudo = frozen_or(frozen, |t| &t.pseudo, || {
            let tags = cfg.sem_tag_mask.then_some(bag.tags.as_slice());
            pseudo_labels(g.value(fwd.corr_sem), g.value(fwd.z), tags)
        })?;
        sem = Some(semantic_loss(&mut g, fwd.z, &pseudo.labels, centers)?);
        targets.pseudo = Some(pseudo);
        sem_fwd = Some(fwd);
    }

    let (mut con_sd, mut con_ds, mut gcl_ins, mut gcl_sem) = (None, None, None, None);
    if mask.contrastive() {
        let ins_side = match &targets.approx {
            Some(labels) => {
                let adj = frozen_or(frozen, |t| &t.inst_graph, || {
                    build_instance_graph(&bag.proposals, cfg.iou_edge)
                })?;
                let one_hot = g.constant(labels.one_hot(k))?;
                let pair = instance_embeddings(&mut g, &adj, x, one_hot, &vars.igcl)?;
                targets.inst_graph = Some(adj);
                Some(pair)
            }
            None => None,
        };
        let sem_side = match sem_fwd {
            Some(fwd) => {
                let adj = frozen_or(frozen, |t| &t.sem_graph, || build_semantic_graph(g.value(fwd.z), cfg.knn))?;
                let pair = semantic_embeddings(&mut g, &adj, fwd.z, fwd.y_hat, &vars.igcl)?;
                targets.sem_graph = Some(adj);
                Some(pair)
            }
            None => None,
        };
        if mask.m4 {
            let ((u, u2), (v, v2)) = (ins_side.unwrap(), sem_side.unwrap());
            con_sd = Some(info_nce(&mut g, u, v, cfg.tau)?);
            con_ds = Some(info_nce(&mut g, u2, v2, cfg.tau)?);
        } else {
            if let Some((u, u2)) = ins_side {
                gcl_ins = Some(info_nce(&mut g, u, u2, cfg.tau)?);
            }
            if let Some((v, v2)) = sem_side {
                gcl_sem = Some(info_nce(&mut g, v, v2, cfg.tau)?);
            }
        }
    }

    let mut terms = Vec::new();
    if let Some(l) = ins {
        terms.push(g.affine(l, cfg.lambda_ins, 0.0)?);
    }
    if let Some(l) = sem {
        terms.push(g.affine(l, cfg.lambda_sem, 0.0)?);
    }
    for l in [con_sd, con_ds, gcl_ins, gcl_sem].into_iter().flatten() {
        terms.push(g.affine(l, cfg.lambda_igcl, 0.0)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }

    Ok(BagLosses {
        graph: g,
        vars,
        total,
        ins,
        sem,
        con_sd,
        con_ds,
        gcl_ins,
        gcl_sem,
        z: sem_fwd.map(|f| f.z),
        targets,
    })
}

/// Parameters plus everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Params,
    /// One per parameter, same shapes.
    pub velocity: Vec<Tensor>,
    /// `K × K`
    pub centers: Tensor,
    /// `K × K` running category correlation, identity until updated.
    pub corr_sem: Tensor,
    pub step: u64,
    pub epoch: usize,
    pub mask: ModuleMask,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn init(k: usize, d: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = Params::init(k, d, cfg, &mut rng)?;
        let velocity = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            params,
            velocity,
            centers: Tensor::identity(k),
            corr_sem: Tensor::identity(k),
            step: 0,
            epoch: 0,
            mask: cfg.mask,
            rng,
        })
    }

    /// The running correlation when `cfg` asks for one.
    pub fn running_corr(&self, cfg: &TrainConfig) -> Option<&Tensor> {
        (cfg.corr_sem_rate > 0.0).then_some(&self.corr_sem)
    }
}

/// `v ← μ·v + g + wd·w`, `w ← w − lr·v` for every parameter the mask
/// enables; advances the step counter.
pub fn sgd_step(state: &mut TrainState, grads: &[Tensor], lr: f64, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != PARAM_NAMES.len() {
        return Err(Error::dim("sgd_step", format!("{} gradients", grads.len())));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::TrainingAborted {
                step: state.step,
                msg: format!("non-finite gradient for {} (max |g| = {})", PARAM_NAMES[i], g.max_abs()),
            });
        }
    }
    let mask = state.mask;
    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    for (i, (w, v)) in state.params.tensors_mut().into_iter().zip(state.velocity.iter_mut()).enumerate() {
        if !Params::active(&mask, i) {
            continue;
        }
        let g = &grads[i];
        if g.shape() != w.shape() {
            return Err(Error::dim("sgd_step", format!("{} gradient shape {:?}", PARAM_NAMES[i], g.shape())));
        }
        for ((wj, vj), gj) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vj = mu * *vj + gj + wd * *wj;
            *wj -= lr * *vj;
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ins: f64,
    pub loss_sem: f64,
    pub loss_igcl: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss_total,loss_ins,loss_sem,loss_igcl,lr";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[EpochMetrics]) -> Result<()> {
    writeln!(w, "{}", METRICS_HEADER)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.loss_total, r.loss_ins, r.loss_sem, r.loss_igcl, r.lr
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Optimizer steps per bag visit.
fn phases(cfg: &TrainConfig) -> Vec<TrainConfig> {
    if !cfg.phase_sequential {
        return vec![cfg.clone()];
    }
    let m = cfg.mask;
    let mut out = Vec::new();
    if m.m1 {
        out.push(cfg.only(true, false, false));
    }
    if m.m2 {
        out.push(cfg.only(false, true, false));
    }
    if m.contrastive() {
        out.push(cfg.only(false, false, true));
    }
    out
}

/// Total optimizer steps of a full run on `num_bags` bags.
pub fn total_steps(cfg: &TrainConfig, num_bags: usize) -> u64 {
    let per_epoch = num_bags.div_ceil(cfg.batch_size) * phases(cfg).len();
    (per_epoch * cfg.epochs) as u64
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(TrainState, Vec<EpochMetrics>)> {
    let (k, d) = dataset
        .dims()
        .ok_or_else(|| Error::EmptyBag("training set has no bags".into()))?;
    let mut state = TrainState::init(k, d, cfg)?;
    let metrics = train_until(dataset, cfg, &mut state, cfg.epochs)?;
    Ok((state, metrics))
}

/// Continues `state` until `until_epoch` epochs (at most `cfg.epochs`) are
/// complete, returning one metrics row per epoch run.
pub fn train_until(
    dataset: &Dataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
    until_epoch: usize,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyBag("training set has no bags".into()));
    }
    if state.mask != cfg.mask {
        return Err(Error::Compatibility(format!(
            "state trained with {} but config asks for {}",
            state.mask.label(),
            cfg.mask.label()
        )));
    }
    let total = total_steps(cfg, dataset.len());
    let phase_cfgs = phases(cfg);
    let mut out = Vec::new();
    while state.epoch < until_epoch.min(cfg.epochs) {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut state.rng);
        let mut sums = [0.0f64; 4];
        for batch in order.chunks(cfg.batch_size) {
            for pc in &phase_cfgs {
                let mut acc: Option<Vec<Tensor>> = None;
                for &b in batch {
                    let bag = &dataset.bags[b];
                    let mut l = composite_loss(bag, &state.params, &state.centers, state.running_corr(cfg), pc, None)?;
                    l.graph.backward(l.total)?;
                    let grads: Vec<Tensor> = l.vars.all().iter().map(|&v| l.graph.grad(v)).collect();
                    match acc.as_mut() {
                        None => acc = Some(grads),
                        Some(a) => {
                            for (x, y) in a.iter_mut().zip(&grads) {
                                *x = x.zip_map(y, |p, q| p + q)?;
                            }
                        }
                    }
                    if pc.lambda_ins > 0.0 || !cfg.phase_sequential {
                        sums[1] += l.value(l.ins);
                    }
                    if pc.lambda_sem > 0.0 || !cfg.phase_sequential {
                        sums[2] += l.value(l.sem);
                    }
                    if pc.lambda_igcl > 0.0 || !cfg.phase_sequential {
                        sums[3] += l.contrastive_value();
                    }
                    if let (Some(z), Some(p)) = (l.z, &l.targets.pseudo) {
                        if pc.lambda_sem > 0.0 || !cfg.phase_sequential {
                            state.centers = update_centers(&state.centers, l.graph.value(z), &p.labels, cfg.theta)?;
                            if cfg.corr_sem_rate > 0.0 && bag.len() >= 2 {
                                let c = correlation_matrix(l.graph.value(z))?;
                                state.corr_sem = blend_correlation(&state.corr_sem, &c, cfg.corr_sem_rate)?;
                            }
                        }
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                let grads: Vec<Tensor> = acc.unwrap().iter().map(|t| t.map(|v| v * scale)).collect();
                let lr = cfg.lr_at(state.step, total);
                sgd_step(state, &grads, lr, cfg)?;
            }
        }
        state.epoch += 1;
        let n = dataset.len() as f64;
        let (ins, sem, con) = (sums[1] / n, sums[2] / n, sums[3] / n);
        let row = EpochMetrics {
            epoch: state.epoch,
            loss_total: cfg.lambda_ins * ins + cfg.lambda_sem * sem + cfg.lambda_igcl * con,
            loss_ins: ins,
            loss_sem: sem,
            loss_igcl: con,
            lr: cfg.lr_at(state.step.saturating_sub(1), total),
        };
        log::info!(
            "epoch {} total {:.5} ins {:.5} sem {:.5} igcl {:.5} lr {}",
            row.epoch,
            row.loss_total,
            row.loss_ins,
            row.loss_sem,
            row.loss_igcl,
            row.lr
        );
        out.push(row);
    }
    Ok(out)
}
