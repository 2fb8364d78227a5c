//! Central finite-difference checks of every loss against the analytic
//! gradients of the autodiff engine.
//!
//! Labels, pseudo labels and graphs are recomputed only at the base point
//! and then held fixed, so each checked loss is a smooth function of the
//! parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{BBox, Bag};
use crate::error::Result;
use crate::numerics::{Tensor, Var};
use crate::trainer::{composite_loss, BagLosses, ModuleMask, Params, TrainConfig, Targets, PARAM_NAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub bags: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub max_instances: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Negative control: perturbs the backward pass of every matmul.
    pub corrupt_backward: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            bags: 10,
            seed: 2024,
            step: 1e-4,
            tolerance: 1e-4,
            max_instances: 8,
            classes: 4,
            feature_dim: 12,
            hidden: 8,
            embed: 6,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Instance,
    Semantic,
    ContrastSd,
    ContrastDs,
    Composite,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Instance,
        LossKind::Semantic,
        LossKind::ContrastSd,
        LossKind::ContrastDs,
        LossKind::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Instance => "L_ins",
            LossKind::Semantic => "L_sem",
            LossKind::ContrastSd => "L_con(S->D)",
            LossKind::ContrastDs => "L_con(D->S)",
            LossKind::Composite => "L",
        }
    }

    fn mask(self) -> ModuleMask {
        match self {
            LossKind::Instance => ModuleMask::sub_method('A').unwrap(),
            LossKind::Semantic => ModuleMask::sub_method('B').unwrap(),
            _ => ModuleMask::FULL,
        }
    }

    fn pick(self, l: &BagLosses) -> Option<Var> {
        match self {
            LossKind::Instance => l.ins,
            LossKind::Semantic => l.sem,
            LossKind::ContrastSd => l.con_sd,
            LossKind::ContrastDs => l.con_ds,
            LossKind::Composite => Some(l.total),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub loss: LossKind,
    pub param: &'static str,
    /// Largest `|a − n| / max(|a|, |n|, 1e-6)` over entries and bags.
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
    pub entries: usize,
}

impl GradCheckRow {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Relative error floor for gradients that are (numerically) zero.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// A random bag with overlapping boxes and at least one positive tag.
pub fn random_bag(rng: &mut ChaCha8Rng, gc: &GradCheckConfig, id: usize) -> Result<Bag> {
    let n = rng.random_range(2..=gc.max_instances.max(2));
    let mut proposals = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(0.0..40.0);
        let y = rng.random_range(0.0..40.0);
        proposals.push(BBox::new(x, y, x + rng.random_range(16.0..40.0), y + rng.random_range(16.0..40.0))?);
    }
    let d = gc.feature_dim;
    let features = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let mut tags: Vec<u8> = (0..gc.classes).map(|_| u8::from(rng.random_bool(0.4))).collect();
    let forced = rng.random_range(0..gc.classes);
    tags[forced] = 1;
    Ok(Bag {
        image_id: format!("gc{}", id),
        canvas: [100.0, 100.0],
        proposals,
        features,
        tags,
    })
}

fn eval_at(bag: &Bag, params: &Params, centers: &Tensor, cfg: &TrainConfig, kind: LossKind, frozen: &Targets) -> Result<f64> {
    let l = composite_loss(bag, params, centers, None, cfg, Some(frozen))?;
    Ok(kind.pick(&l).map_or(0.0, |v| l.graph.value(v).item()))
}

/// One row per (loss, parameter tensor) that the loss can reach.
pub fn run_grad_check(base: &TrainConfig, gc: &GradCheckConfig) -> Result<Vec<GradCheckRow>> {
    let mut rows: Vec<GradCheckRow> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    for b in 0..gc.bags {
        let bag = random_bag(&mut rng, gc, b)?;
        let k = gc.classes;
        let mut centers = Tensor::matrix(k, k, (0..k * k).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        for r in 0..k {
            centers.row_mut(r)[r] += 2.0;
        }
        for kind in LossKind::ALL {
            let mut cfg = TrainConfig {
                mask: kind.mask(),
                hidden: gc.hidden,
                embed: gc.embed,
                seed: rng.random(),
                ..base.clone()
            };
            if kind != LossKind::Composite {
                cfg.lambda_ins = 1.0;
                cfg.lambda_sem = 1.0;
                cfg.lambda_igcl = 1.0;
            }
            let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut params = Params::init(k, gc.feature_dim, &cfg, &mut prng)?;

            let mut l = composite_loss(&bag, &params, &centers, None, &cfg, None)?;
            let Some(target) = kind.pick(&l) else { continue };
            l.graph.set_corrupt_backward(gc.corrupt_backward);
            l.graph.backward(target)?;
            let analytic: Vec<Tensor> = l.vars.all().iter().map(|&v| l.graph.grad(v)).collect();
            let frozen = l.targets.clone();

            for (i, grad) in analytic.iter().enumerate() {
                if !Params::active(&cfg.mask, i) {
                    continue;
                }
                let mut worst: f64 = 0.0;
                for j in 0..grad.len() {
                    let orig = params.tensors()[i].data()[j];
                    params.tensors_mut()[i].data_mut()[j] = orig + gc.step;
                    let up = eval_at(&bag, &params, &centers, &cfg, kind, &frozen)?;
                    params.tensors_mut()[i].data_mut()[j] = orig - gc.step;
                    let down = eval_at(&bag, &params, &centers, &cfg, kind, &frozen)?;
                    params.tensors_mut()[i].data_mut()[j] = orig;
                    let numeric = (up - down) / (2.0 * gc.step);
                    worst = worst.max(rel_err(grad.data()[j], numeric));
                }
                let name = PARAM_NAMES[i];
                match rows.iter_mut().find(|r| r.loss == kind && r.param == name) {
                    Some(r) => {
                        r.max_rel_err = r.max_rel_err.max(worst);
                        r.max_abs_grad = r.max_abs_grad.max(grad.max_abs());
                        r.entries += grad.len();
                    }
                    None => rows.push(GradCheckRow {
                        loss: kind,
                        param: name,
                        max_rel_err: worst,
                        max_abs_grad: grad.max_abs(),
                        entries: grad.len(),
                    }),
                }
            }
        }
    }
    Ok(rows)
}
