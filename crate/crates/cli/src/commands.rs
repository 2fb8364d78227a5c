use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use jlwsod::datamodel::{generate_dataset, load_jsonl, save_jsonl, Dataset};
use jlwsod::evalmetrics::{build_report, corloc, mean_ap, Detection, Report};
use jlwsod::gradcheck::{run_grad_check, GradCheckConfig, GradCheckRow};
use jlwsod::trainer::{
    infer, load_checkpoint, save_checkpoint, train, train_until, write_metrics_csv, EpochMetrics, ModuleMask,
    TrainConfig, TrainState, METRICS_HEADER,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file(self) -> &'static str {
        match self {
            Split::Train => TRAIN_FILE,
            Split::Test => TEST_FILE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Writes `train.jsonl` and `test.jsonl` into `out_dir`; returns the scene
/// count of each.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<(usize, usize)> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ds = generate_dataset(&cfg.scene_config(), cfg.num_scenes)?;
    let n_train = (cfg.num_scenes as f64 * cfg.train_fraction).round() as usize;
    let (tr, te) = ds.split_at(n_train.min(cfg.num_scenes));
    save_jsonl(out_dir.join(TRAIN_FILE), &tr)?;
    save_jsonl(out_dir.join(TEST_FILE), &te)?;
    Ok((tr.len(), te.len()))
}

/// One split of a `gen-data` directory with small proposals removed.
pub fn load_split(cfg: &RunConfig, data_dir: &Path, split: Split) -> Result<Dataset> {
    let path = data_dir.join(split.file());
    let ds = load_jsonl(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ds.filtered(cfg.min_proposal_side)?)
}

fn check_compatible(state: &TrainState, ds: &Dataset) -> Result<()> {
    if let Some((k, d)) = ds.dims() {
        let (mk, md) = (state.params.num_classes(), state.params.feature_dim());
        if (k, d) != (mk, md) {
            bail!(jlwsod::Error::Compatibility(format!(
                "checkpoint has K={}, D={} but dataset has K={}, D={}",
                mk, md, k, d
            )));
        }
    }
    Ok(())
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Rows produced by this invocation.
    pub metrics: Vec<EpochMetrics>,
}

/// Trains on the training split and writes the checkpoint plus a metrics
/// CSV. With `resume` and an existing checkpoint, training continues from
/// it and the new rows are appended to the CSV.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, checkpoint: &Path, metrics: &Path, resume: bool) -> Result<TrainOutcome> {
    let ds = load_split(cfg, data_dir, Split::Train)?;
    if ds.is_empty() {
        bail!("training split {} is empty", data_dir.join(TRAIN_FILE).display());
    }
    let (state, rows, append) = if resume && checkpoint.exists() {
        let mut state = load_checkpoint(checkpoint)?;
        check_compatible(&state, &ds)?;
        let rows = train_until(&ds, &cfg.train, &mut state, cfg.train.epochs)?;
        (state, rows, metrics.exists())
    } else {
        let (state, rows) = train(&ds, &cfg.train)?;
        (state, rows, false)
    };
    save_checkpoint(checkpoint, &state)?;
    if append {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows)?;
        let body = &buf[METRICS_HEADER.len() + 1..];
        OpenOptions::new().append(true).open(metrics)?.write_all(body)?;
    } else {
        write_metrics_csv(BufWriter::new(File::create(metrics)?), &rows)?;
    }
    Ok(TrainOutcome { state, metrics: rows })
}

pub fn detections(cfg: &TrainConfig, state: &TrainState, mask: &ModuleMask, ds: &Dataset) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for bag in &ds.bags {
        out.extend(infer(bag, &state.params, state.running_corr(cfg), mask, cfg)?);
    }
    Ok(out)
}

fn provenance(cfg: &RunConfig, state: &TrainState, extra: &[(&str, &str)]) -> serde_json::Value {
    let mut eff = cfg.clone();
    eff.train.mask = state.mask;
    let mut echo = eff.echo();
    if let serde_json::Value::Object(m) = &mut echo {
        for (k, v) in extra {
            m.insert(k.to_string(), (*v).into());
        }
    }
    echo
}

/// Evaluates a checkpoint on one split. The training split also reports
/// CorLoc.
pub fn evaluate(cfg: &RunConfig, state: &TrainState, ds: &Dataset, split: Split) -> Result<Report> {
    check_compatible(state, ds)?;
    let dets = detections(&cfg.train, state, &state.mask, ds)?;
    let k = state.params.num_classes();
    let cl = match split {
        Split::Train => Some(corloc(&dets, &ds.ground_truth).unwrap_or(0.0)),
        Split::Test => None,
    };
    let echo = provenance(cfg, state, &[("split", split.name())]);
    Ok(build_report(&dets, &ds.ground_truth, k, cl, echo))
}

pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, split: Split, report: &Path) -> Result<Report> {
    let state = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let ds = load_split(cfg, data_dir, split)?;
    let r = evaluate(cfg, &state, &ds, split)?;
    fs::write(report, to_json(&r)?)?;
    Ok(r)
}

pub const SUB_METHODS: [char; 6] = ['A', 'B', 'C', 'D', 'E', 'F'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub sub_method: char,
    pub modules: String,
    pub seed: u64,
    pub map50: f64,
    pub corloc: f64,
    /// Largest absolute change of any detection-head weight from its
    /// initial value.
    pub head_update: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sub_method: char,
    pub modules: String,
    pub map50: f64,
    pub corloc: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ablation_run(cfg: &RunConfig, train_ds: &Dataset, test_ds: &Dataset, sub: char, seed: u64) -> Result<AblationRun> {
    let mask = ModuleMask::sub_method(sub)?;
    let tc = TrainConfig {
        mask,
        seed,
        ..cfg.train.clone()
    };
    let (k, d) = train_ds.dims().expect("non-empty training split");
    let init = TrainState::init(k, d, &tc)?;
    let (state, _) = train(train_ds, &tc)?;
    let test_dets = detections(&tc, &state, &mask, test_ds)?;
    let train_dets = detections(&tc, &state, &mask, train_ds)?;
    let head_update = init.params.tensors()[..3]
        .iter()
        .zip(&state.params.tensors()[..3])
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok(AblationRun {
        sub_method: sub,
        modules: mask.label(),
        seed,
        map50: mean_ap(&test_dets, &test_ds.ground_truth, 0.5).unwrap_or(0.0),
        corloc: corloc(&train_dets, &train_ds.ground_truth).unwrap_or(0.0),
        head_update,
    })
}

/// Trains every sub-method with every seed (in parallel) and reports the
/// per-sub-method medians. Output order is fixed.
pub fn run_ablation(cfg: &RunConfig, train_ds: &Dataset, test_ds: &Dataset) -> Result<Ablation> {
    if train_ds.is_empty() {
        bail!("training split is empty");
    }
    let jobs: Vec<(char, u64)> = SUB_METHODS
        .iter()
        .flat_map(|&s| cfg.ablate_seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(s, seed)| ablation_run(cfg, train_ds, test_ds, s, seed))
        .collect::<Result<Vec<_>>>()?;
    let rows = SUB_METHODS
        .iter()
        .map(|&s| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.sub_method == s).collect();
            AblationRow {
                sub_method: s,
                modules: mine[0].modules.clone(),
                map50: median(&mine.iter().map(|r| r.map50).collect::<Vec<_>>()),
                corloc: median(&mine.iter().map(|r| r.corloc).collect::<Vec<_>>()),
                seeds: mine.len(),
            }
        })
        .collect();
    Ok(Ablation { runs, rows })
}

pub fn ablation_csv(a: &Ablation) -> String {
    let mut s = String::from("sub_method,modules,map50,corloc,seeds\n");
    for r in &a.rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.sub_method, r.modules, r.map50, r.corloc, r.seeds));
    }
    s
}

pub fn ablation_runs_csv(a: &Ablation) -> String {
    let mut s = String::from("sub_method,modules,seed,map50,corloc,head_update\n");
    for r in &a.runs {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sub_method, r.modules, r.seed, r.map50, r.corloc, r.head_update
        ));
    }
    s
}

/// Parses the table written by [`ablation_csv`].
pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("sub_method,modules,map50,corloc,seeds") {
        bail!("not an ablation table");
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 || f[0].chars().count() != 1 {
                bail!("bad ablation row {:?}", l);
            }
            Ok(AblationRow {
                sub_method: f[0].chars().next().unwrap(),
                modules: f[1].to_string(),
                map50: f[2].parse()?,
                corloc: f[3].parse()?,
                seeds: f[4].parse()?,
            })
        })
        .collect()
}

pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, out: &Path, runs_out: Option<&Path>) -> Result<Ablation> {
    let train_ds = load_split(cfg, data_dir, Split::Train)?;
    let test_ds = load_split(cfg, data_dir, Split::Test)?;
    let a = run_ablation(cfg, &train_ds, &test_ds)?;
    fs::write(out, ablation_csv(&a))?;
    if let Some(p) = runs_out {
        fs::write(p, ablation_runs_csv(&a))?;
    }
    Ok(a)
}

pub struct GradCheckOutcome {
    pub rows: Vec<GradCheckRow>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed(self.tolerance))
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:<16} {:>12} {:>12} {:>8}  result\n", "loss", "param", "max_rel_err", "max_|grad|", "entries");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:<16} {:>12.3e} {:>12.3e} {:>8}  {}\n",
                r.loss.name(),
                r.param,
                r.max_rel_err,
                r.max_abs_grad,
                r.entries,
                if r.passed(self.tolerance) { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

pub fn cmd_grad_check(cfg: &RunConfig, corrupt_backward: bool) -> Result<GradCheckOutcome> {
    let gc = GradCheckConfig {
        corrupt_backward,
        ..cfg.grad_check.clone()
    };
    let t = Instant::now();
    let rows = run_grad_check(&cfg.train, &gc)?;
    Ok(GradCheckOutcome {
        rows,
        tolerance: gc.tolerance,
        seconds: t.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub detection: Report,
    pub localization: Report,
    pub ablation: Option<Vec<AblationRow>>,
    pub config: serde_json::Value,
}

/// Test-split detection metrics, training-split localization metrics and,
/// when given, an ablation table, in one document.
pub fn cmd_report(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    ablation: Option<&Path>,
    out: &Path,
) -> Result<CombinedReport> {
    let state = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let detection = evaluate(cfg, &state, &load_split(cfg, data_dir, Split::Test)?, Split::Test)?;
    let localization = evaluate(cfg, &state, &load_split(cfg, data_dir, Split::Train)?, Split::Train)?;
    let ablation = match ablation {
        Some(p) => Some(parse_ablation_csv(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?),
        None => None,
    };
    let r = CombinedReport {
        detection,
        localization,
        ablation,
        config: provenance(cfg, &state, &[]),
    };
    fs::write(out, to_json(&r)?)?;
    Ok(r)
}

/// Default metrics path next to a checkpoint.
pub fn metrics_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("metrics.csv")
}
