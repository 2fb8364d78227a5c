//! Run configuration: a `key = value` text file, overridable with
//! `--set key=value`. Every key is listed in [`SCHEMA`]; anything else is
//! rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use jlwsod::datamodel::{default_cooccurrence, SceneConfig, MIN_PROPOSAL_SIDE};
use jlwsod::gradcheck::GradCheckConfig;
use jlwsod::trainer::{ModuleMask, TrainConfig};

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, default, help }
}

/// The published schema, in display order.
pub const SCHEMA: &[KeySpec] = &[
    key("classes", "6", "number of categories K"),
    key("feature_dim", "32", "proposal feature dimension D"),
    key("canvas_width", "256", "scene width in pixels"),
    key("canvas_height", "256", "scene height in pixels"),
    key("min_objects", "1", "fewest objects per scene"),
    key("max_objects", "4", "most objects per scene"),
    key("min_object_side", "40", "smallest object side in pixels"),
    key("max_object_side", "120", "largest object side in pixels"),
    key("proposals_per_scene", "30", "proposals per scene, background included"),
    key("proposals_per_object", "4", "one tight plus loose proposals per object"),
    key("jitter", "0.05", "tight-proposal corner jitter, fraction of object side"),
    key("min_background_side", "8", "smallest background proposal side"),
    key("max_background_side", "96", "largest background proposal side"),
    key("cooccurrence", "auto", "K*K comma-separated co-occurrence weights, or auto"),
    key("noise_sigma", "0.1", "feature noise standard deviation"),
    key("context_weight", "0.2", "weight of the scene context term in features"),
    key("data_seed", "7", "generator seed"),
    key("num_scenes", "250", "scenes written by gen-data"),
    key("train_fraction", "0.8", "fraction of scenes in the training split"),
    key("min_proposal_side", "16", "proposals narrower than this are dropped on load"),
    key("lambda_ins", "1", "weight of the instance-branch loss"),
    key("lambda_sem", "1", "weight of the semantic-branch loss"),
    key("lambda_igcl", "1", "weight of the contrastive losses"),
    key("lse_r", "4", "smooth-maximum sharpness for image-level pooling"),
    key("gamma", "0.9", "approximated-label score ratio"),
    key("theta", "0.0001", "class-center update rate"),
    key("tau", "5", "contrastive temperature"),
    key("lr_schedule", "0:0.001,0.8:0.0001", "fraction:rate breakpoints over total steps"),
    key("momentum", "0.9", "SGD momentum"),
    key("weight_decay", "0.0005", "SGD weight decay"),
    key("epochs", "20", "training epochs"),
    key("batch_size", "1", "bags per optimizer step"),
    key("seed", "0", "training seed"),
    key("mask", "M1+M2+M4", "modules to train, e.g. M1+M2 or a sub-method letter A-F"),
    key("iou_edge", "0.3", "instance-graph IoU edge threshold"),
    key("knn", "5", "semantic-graph neighbours per node"),
    key("hidden", "32", "GCN hidden width"),
    key("embed", "16", "contrastive embedding width"),
    key("init_gain", "1", "weight init standard deviation times sqrt(fan_in)"),
    key("phase_sequential", "false", "one optimizer step per loss group instead of a fused step"),
    key("sem_tag_mask", "true", "restrict semantic pseudo labels to positive tags"),
    key("corr_sem_rate", "0", "running category-correlation rate, 0 for per-bag estimates"),
    key("nms_iou", "0.3", "per-class NMS IoU threshold"),
    key("min_score", "0.001", "detections scoring below this are dropped"),
    key("ablate_seeds", "0,1,2,3,4", "seeds shared by every ablation row"),
    key("gc_bags", "10", "gradient check: random bags"),
    key("gc_seed", "2024", "gradient check: seed"),
    key("gc_step", "0.0001", "gradient check: central-difference step"),
    key("gc_tolerance", "0.0001", "gradient check: largest accepted relative error"),
    key("gc_max_instances", "8", "gradient check: most instances per bag"),
    key("gc_classes", "4", "gradient check: classes"),
    key("gc_feature_dim", "12", "gradient check: feature dimension"),
    key("gc_hidden", "8", "gradient check: GCN hidden width"),
    key("gc_embed", "6", "gradient check: embedding width"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    /// `None` derives the default pattern from the class count.
    pub cooccurrence: Option<Vec<f64>>,
    pub num_scenes: usize,
    pub train_fraction: f64,
    pub min_proposal_side: f64,
    pub train: TrainConfig,
    pub ablate_seeds: Vec<u64>,
    pub grad_check: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            cooccurrence: None,
            num_scenes: 250,
            train_fraction: 0.8,
            min_proposal_side: MIN_PROPOSAL_SIDE,
            train: TrainConfig::default(),
            ablate_seeds: (0..5).collect(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("{:?}: {}", v, e))
}

fn flag(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("{:?}: expected true or false", v),
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| num(s.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_mask(v: &str) -> Result<ModuleMask> {
    let m = if v.len() == 1 {
        ModuleMask::sub_method(v.chars().next().unwrap())
    } else {
        ModuleMask::parse(v)
    };
    m.map_err(|e| anyhow!("{}", e))
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let s = &mut self.scene;
        let t = &mut self.train;
        let g = &mut self.grad_check;
        match key {
            "classes" => s.classes = num(v)?,
            "feature_dim" => s.feature_dim = num(v)?,
            "canvas_width" => s.canvas[0] = num(v)?,
            "canvas_height" => s.canvas[1] = num(v)?,
            "min_objects" => s.min_objects = num(v)?,
            "max_objects" => s.max_objects = num(v)?,
            "min_object_side" => s.min_object_side = num(v)?,
            "max_object_side" => s.max_object_side = num(v)?,
            "proposals_per_scene" => s.proposals_per_scene = num(v)?,
            "proposals_per_object" => s.proposals_per_object = num(v)?,
            "jitter" => s.jitter = num(v)?,
            "min_background_side" => s.min_background_side = num(v)?,
            "max_background_side" => s.max_background_side = num(v)?,
            "cooccurrence" => self.cooccurrence = if v == "auto" { None } else { Some(list(v)?) },
            "noise_sigma" => s.noise_sigma = num(v)?,
            "context_weight" => s.context_weight = num(v)?,
            "data_seed" => s.seed = num(v)?,
            "num_scenes" => self.num_scenes = num(v)?,
            "train_fraction" => self.train_fraction = num(v)?,
            "min_proposal_side" => self.min_proposal_side = num(v)?,
            "lambda_ins" => t.lambda_ins = num(v)?,
            "lambda_sem" => t.lambda_sem = num(v)?,
            "lambda_igcl" => t.lambda_igcl = num(v)?,
            "lse_r" => t.lse_r = num(v)?,
            "gamma" => t.gamma = num(v)?,
            "theta" => t.theta = num(v)?,
            "tau" => t.tau = num(v)?,
            "lr_schedule" => {
                t.lr_schedule = v
                    .split(',')
                    .map(|p| {
                        let (f, r) = p
                            .split_once(':')
                            .ok_or_else(|| anyhow!("{:?}: expected fraction:rate", p))?;
                        Ok((num(f.trim())?, num(r.trim())?))
                    })
                    .collect::<Result<_>>()?
            }
            "momentum" => t.momentum = num(v)?,
            "weight_decay" => t.weight_decay = num(v)?,
            "epochs" => t.epochs = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "seed" => t.seed = num(v)?,
            "mask" => t.mask = parse_mask(v)?,
            "iou_edge" => t.iou_edge = num(v)?,
            "knn" => t.knn = num(v)?,
            "hidden" => t.hidden = num(v)?,
            "embed" => t.embed = num(v)?,
            "init_gain" => t.init_gain = num(v)?,
            "phase_sequential" => t.phase_sequential = flag(v)?,
            "sem_tag_mask" => t.sem_tag_mask = flag(v)?,
            "corr_sem_rate" => t.corr_sem_rate = num(v)?,
            "nms_iou" => t.nms_iou = num(v)?,
            "min_score" => t.min_score = num(v)?,
            "ablate_seeds" => self.ablate_seeds = list(v)?,
            "gc_bags" => g.bags = num(v)?,
            "gc_seed" => g.seed = num(v)?,
            "gc_step" => g.step = num(v)?,
            "gc_tolerance" => g.tolerance = num(v)?,
            "gc_max_instances" => g.max_instances = num(v)?,
            "gc_classes" => g.classes = num(v)?,
            "gc_feature_dim" => g.feature_dim = num(v)?,
            "gc_hidden" => g.hidden = num(v)?,
            "gc_embed" => g.embed = num(v)?,
            _ => bail!("unknown config key {:?}", key),
        }
        Ok(())
    }

    /// Text form of one key, as [`RunConfig::set`] accepts it.
    pub fn get(&self, key: &str) -> Result<String> {
        let (s, t, g) = (&self.scene, &self.train, &self.grad_check);
        Ok(match key {
            "classes" => s.classes.to_string(),
            "feature_dim" => s.feature_dim.to_string(),
            "canvas_width" => s.canvas[0].to_string(),
            "canvas_height" => s.canvas[1].to_string(),
            "min_objects" => s.min_objects.to_string(),
            "max_objects" => s.max_objects.to_string(),
            "min_object_side" => s.min_object_side.to_string(),
            "max_object_side" => s.max_object_side.to_string(),
            "proposals_per_scene" => s.proposals_per_scene.to_string(),
            "proposals_per_object" => s.proposals_per_object.to_string(),
            "jitter" => s.jitter.to_string(),
            "min_background_side" => s.min_background_side.to_string(),
            "max_background_side" => s.max_background_side.to_string(),
            "cooccurrence" => self.cooccurrence.as_deref().map_or_else(|| "auto".into(), join),
            "noise_sigma" => s.noise_sigma.to_string(),
            "context_weight" => s.context_weight.to_string(),
            "data_seed" => s.seed.to_string(),
            "num_scenes" => self.num_scenes.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "min_proposal_side" => self.min_proposal_side.to_string(),
            "lambda_ins" => t.lambda_ins.to_string(),
            "lambda_sem" => t.lambda_sem.to_string(),
            "lambda_igcl" => t.lambda_igcl.to_string(),
            "lse_r" => t.lse_r.to_string(),
            "gamma" => t.gamma.to_string(),
            "theta" => t.theta.to_string(),
            "tau" => t.tau.to_string(),
            "lr_schedule" => t
                .lr_schedule
                .iter()
                .map(|(f, r)| format!("{}:{}", f, r))
                .collect::<Vec<_>>()
                .join(","),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "mask" => t.mask.label(),
            "iou_edge" => t.iou_edge.to_string(),
            "knn" => t.knn.to_string(),
            "hidden" => t.hidden.to_string(),
            "embed" => t.embed.to_string(),
            "init_gain" => t.init_gain.to_string(),
            "phase_sequential" => t.phase_sequential.to_string(),
            "sem_tag_mask" => t.sem_tag_mask.to_string(),
            "corr_sem_rate" => t.corr_sem_rate.to_string(),
            "nms_iou" => t.nms_iou.to_string(),
            "min_score" => t.min_score.to_string(),
            "ablate_seeds" => join(&self.ablate_seeds),
            "gc_bags" => g.bags.to_string(),
            "gc_seed" => g.seed.to_string(),
            "gc_step" => g.step.to_string(),
            "gc_tolerance" => g.tolerance.to_string(),
            "gc_max_instances" => g.max_instances.to_string(),
            "gc_classes" => g.classes.to_string(),
            "gc_feature_dim" => g.feature_dim.to_string(),
            "gc_hidden" => g.hidden.to_string(),
            "gc_embed" => g.embed.to_string(),
            _ => bail!("unknown config key {:?}", key),
        })
    }

    /// Parses a config file body. Blank lines and `#` comments are skipped;
    /// a key may appear once.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), i + 1) {
                bail!("line {}: key {:?} already set on line {}", i + 1, k, prev);
            }
            cfg.set(k, v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(cfg)
    }

    /// File (or defaults), then `key=value` overrides in order, then
    /// validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse_text(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => Self::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("--set {:?}: expected key=value", o))?;
            cfg.set(k.trim(), v).with_context(|| format!("--set {}", o))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config().validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.train_fraction) {
            bail!("train_fraction must be in [0,1], got {}", self.train_fraction);
        }
        if !(self.min_proposal_side >= 0.0) {
            bail!("min_proposal_side must be >= 0");
        }
        if self.ablate_seeds.is_empty() {
            bail!("ablate_seeds needs at least one seed");
        }
        let g = &self.grad_check;
        if g.bags == 0 || !(g.step > 0.0) || !(g.tolerance > 0.0) || g.classes == 0 || g.feature_dim == 0 {
            bail!("gradient-check settings must be positive");
        }
        if g.max_instances < 2 || g.hidden == 0 || g.embed == 0 {
            bail!("gc_max_instances must be >= 2 and GCN widths positive");
        }
        Ok(())
    }

    /// The generator settings with the co-occurrence pattern resolved.
    pub fn scene_config(&self) -> SceneConfig {
        let mut s = self.scene.clone();
        s.cooccurrence = match &self.cooccurrence {
            Some(c) => c.clone(),
            None => default_cooccurrence(s.classes),
        };
        s
    }

    /// Every key with its effective value, for report provenance.
    pub fn echo(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = SCHEMA
            .iter()
            .map(|k| (k.name.to_string(), self.get(k.name).expect("schema key").into()))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// The key table shown under `--help`.
pub fn help_text() -> String {
    let width = SCHEMA.iter().map(|k| k.name.len()).max().unwrap_or(0);
    let mut out = String::from(
        "Config keys (file lines `key = value`, or --set key=value; unknown keys are errors):\n",
    );
    for k in SCHEMA {
        let _ = writeln!(out, "  {:<w$}  {}  [default: {}]", k.name, k.help, k.default, w = width);
    }
    out.push_str("\nLog level: RUST_LOG (e.g. RUST_LOG=info).");
    out
}
