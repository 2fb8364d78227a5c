//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Exits 0 after reporting, so an unmet criterion shows up in the output
//! without breaking the rest of the test run. Set `ACCEPTANCE_STRICT=1`
//! to exit nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use jlwsod::datamodel::{generate_dataset, BBox, GroundTruth, GtObject};
use jlwsod::evalmetrics::{coco_map, coco_thresholds, corloc, mean_ap, Detection};
use jlwsod::igcl::info_nce;
use jlwsod::instance_branch::aggregate_lse;
use jlwsod::numerics::{Graph, Tensor};
use jlwsod::semantic_branch::correlation_matrix;
use jlwsod::trainer::{read_checkpoint, train, train_until, write_checkpoint, TrainConfig, TrainState};
use jlwsod_cli::commands::*;
use jlwsod_cli::config::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/eval_report.json");

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// 1 -------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    const TOL: f64 = 1e-4;
    let cfg = RunConfig::default();
    let gc = &cfg.grad_check;
    let shape_ok = gc.bags >= 10 && gc.max_instances <= 8 && gc.classes <= 5 && gc.feature_dim <= 16 && gc.step == 1e-4;
    let o = cmd_grad_check(&cfg, false).expect("grad check runs");
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &o.rows {
        let w = worst.entry(r.loss.name()).or_insert(0.0);
        *w = w.max(r.max_rel_err);
    }
    let all_losses = worst.len() == 5;
    let max = worst.values().cloned().fold(0.0, f64::max);
    let pass = shape_ok && all_losses && max < TOL && o.seconds < 30.0;
    let per: Vec<String> = worst.iter().map(|(k, v)| format!("{} {:.1e}", k, v)).collect();
    outcome(
        pass,
        format!(
            "max rel err {:.2e} < {:.0e} over {} bags (|B|<={}, K={}, D={}); {}; {:.2}s < 30s",
            max,
            TOL,
            gc.bags,
            gc.max_instances,
            gc.classes,
            gc.feature_dim,
            per.join(", "),
            o.seconds
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn lse(v: &[f64], r: f64) -> f64 {
    let col = Tensor::matrix(v.len(), 1, v.to_vec()).unwrap();
    aggregate_lse(&col, r).unwrap().data()[0]
}

fn lse_contract() -> Outcome {
    const EPS: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let rs = [0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 100.0];
    let mut violations = 0usize;
    let mut worst_gap: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let scale = [0.01, 1.0, 10.0][rng.random_range(0..3)];
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let vals: Vec<f64> = rs.iter().map(|&r| lse(&v, r)).collect();
        for &x in &vals {
            if !(mean - EPS <= x && x <= max + EPS) {
                violations += 1;
            }
        }
        for w in vals.windows(2) {
            if w[1] < w[0] - EPS {
                violations += 1;
            }
        }
        let gap = max - lse(&v, 100.0);
        worst_gap = worst_gap.max(gap / ((n as f64).ln() / 100.0).max(f64::MIN_POSITIVE));
        if gap > (n as f64).ln() / 100.0 + EPS {
            violations += 1;
        }
    }
    outcome(
        violations == 0,
        format!(
            "1000 vectors, r in {:?}: {} violations of mean <= LSE <= max, monotone r, max - LSE(100) <= ln(n)/100 (worst ratio {:.3})",
            rs, violations, worst_gap
        ),
    )
}

// 3 -------------------------------------------------------------------------

/// Two-pass Pearson correlation between columns, identity for constant
/// columns.
fn pearson_oracle(z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = z.len() as f64;
    let d = z[0].len();
    let mean: Vec<f64> = (0..d).map(|p| z.iter().map(|r| r[p]).sum::<f64>() / n).collect();
    let cov = |p: usize, q: usize| z.iter().map(|r| (r[p] - mean[p]) * (r[q] - mean[q])).sum::<f64>() / n;
    let var: Vec<f64> = (0..d).map(|p| cov(p, p)).collect();
    let mut out = vec![vec![0.0; d]; d];
    for p in 0..d {
        for q in 0..d {
            out[p][q] = if var[p] <= 1e-12 || var[q] <= 1e-12 {
                if p == q {
                    1.0
                } else {
                    0.0
                }
            } else {
                cov(p, q) / (var[p] * var[q]).sqrt()
            };
        }
    }
    out
}

fn correlation_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (mut max_err, mut max_asym, mut max_diag, mut max_abs): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for b in 0..100 {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(2..=6);
        let mut z: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        if b % 10 == 0 {
            for r in z.iter_mut() {
                r[0] = 0.7;
            }
        }
        if b % 10 == 1 {
            for r in z.iter_mut() {
                r[1] = -2.0 * r[0];
            }
        }
        let t = Tensor::matrix(n, d, z.iter().flatten().cloned().collect()).unwrap();
        let c = correlation_matrix(&t).unwrap();
        let o = pearson_oracle(&z);
        for p in 0..d {
            max_diag = max_diag.max((c.get(p, p) - 1.0).abs());
            for q in 0..d {
                max_err = max_err.max((c.get(p, q) - o[p][q]).abs());
                max_asym = max_asym.max((c.get(p, q) - c.get(q, p)).abs());
                max_abs = max_abs.max(c.get(p, q).abs());
            }
        }
    }
    let pass = max_err <= 1e-10 && max_asym <= 1e-9 && max_diag <= 1e-9 && max_abs <= 1.0 + 1e-9;
    outcome(
        pass,
        format!(
            "100 bags: oracle err {:.1e} <= 1e-10, asymmetry {:.1e} <= 1e-9, |diag - 1| {:.1e}, max |entry| {:.12}",
            max_err, max_asym, max_diag, max_abs
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn nce(x: Tensor, y: Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let yv = g.constant(y).unwrap();
    let l = info_nce(&mut g, xv, yv, tau).unwrap();
    g.value(l).item()
}

fn contrastive_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut single: f64 = 0.0;
    let mut uniform_err: f64 = 0.0;
    let mut monotone_fail = 0usize;
    let mut checks = 0usize;
    for _ in 0..200 {
        let e = rng.random_range(2..=8);
        let tau = rng.random_range(0.5..10.0);
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..e).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (a, b) = (row(&mut rng), row(&mut rng));
        single = single.max(nce(Tensor::matrix(1, e, a.clone()).unwrap(), Tensor::matrix(1, e, b.clone()).unwrap(), tau).abs());

        let n = rng.random_range(2..=10);
        let x = Tensor::matrix(n, e, a.iter().cycle().take(n * e).cloned().collect()).unwrap();
        let y = Tensor::matrix(n, e, b.iter().cycle().take(n * e).cloned().collect()).unwrap();
        uniform_err = uniform_err.max((nce(x, y, tau) - (n as f64).ln()).abs());

        // With X = I the similarity matrix is Yᵀ, so raising Y[0][0] raises
        // only the first positive pair.
        let ident = Tensor::identity(n);
        let mut y: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let before = nce(ident.clone(), Tensor::matrix(n, n, y.clone()).unwrap(), tau);
        y[0] += rng.random_range(0.01..1.0);
        let after = nce(ident, Tensor::matrix(n, n, y).unwrap(), tau);
        checks += 1;
        if after.partial_cmp(&before) != Some(std::cmp::Ordering::Less) {
            monotone_fail += 1;
        }
    }
    let pass = single == 0.0 && uniform_err <= 1e-9 && monotone_fail == 0;
    outcome(
        pass,
        format!(
            "|B|=1 -> {:e}; uniform similarity |L - ln|B|| {:.1e} <= 1e-9; positive-pair increase lowered the loss in {}/{}",
            single,
            uniform_err,
            checks - monotone_fail,
            checks
        ),
    )
}

// 5 -------------------------------------------------------------------------

fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

fn rank_key(d: &Detection) -> (std::cmp::Reverse<u64>, String, [u64; 4]) {
    let s = d.score.to_bits();
    let b = [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2].map(|v| v.to_bits());
    (std::cmp::Reverse(s), d.image_id.clone(), b)
}

/// Precision/recall recomputed from scratch for every prefix of the
/// ranking; AP sums, over each recall step, the best precision at that
/// recall or beyond.
fn ap_oracle(dets: &[Detection], gts: &[GroundTruth], class: usize, thr: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(|g| g.objects.iter().filter(|o| o.class == class).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    ranked.sort_by_key(|d| rank_key(d));
    let prefix_tp = |len: usize| -> Vec<bool> {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.objects.len()]).collect();
        let mut flags = Vec::new();
        for d in &ranked[..len] {
            let mut best: Option<(usize, usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate().filter(|(_, g)| g.image_id == d.image_id) {
                for (oi, o) in g.objects.iter().enumerate() {
                    if o.class != class || used[gi][oi] {
                        continue;
                    }
                    let v = iou_oracle(&d.bbox, &o.bbox);
                    if v > thr && best.is_none_or(|(_, _, b)| v > b) {
                        best = Some((gi, oi, v));
                    }
                }
            }
            if let Some((gi, oi, _)) = best {
                used[gi][oi] = true;
            }
            flags.push(best.is_some());
        }
        flags
    };
    let n = ranked.len();
    let mut prec = Vec::with_capacity(n);
    let mut is_tp = Vec::with_capacity(n);
    for len in 1..=n {
        let f = prefix_tp(len);
        prec.push(f.iter().filter(|&&t| t).count() as f64 / len as f64);
        is_tp.push(f[len - 1]);
    }
    let mut ap = 0.0;
    for k in 0..n {
        if is_tp[k] {
            let best = prec[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / num_gt as f64;
        }
    }
    Some(ap)
}

fn map_oracle(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Option<f64> {
    let aps: Vec<f64> = (0..4).filter_map(|k| ap_oracle(dets, gts, k, thr)).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

fn corloc_oracle(dets: &[Detection], gts: &[GroundTruth]) -> Option<f64> {
    let (mut pairs, mut hits) = (0, 0);
    for g in gts {
        let mut classes: Vec<usize> = g.objects.iter().map(|o| o.class).collect();
        classes.sort_unstable();
        classes.dedup();
        for k in classes {
            pairs += 1;
            let top = dets
                .iter()
                .filter(|d| d.image_id == g.image_id && d.class == k)
                .min_by_key(|d| rank_key(d));
            if let Some(d) = top {
                if g.objects.iter().any(|o| o.class == k && iou_oracle(&o.bbox, &d.bbox) > 0.5) {
                    hits += 1;
                }
            }
        }
    }
    (pairs > 0).then(|| hits as f64 / pairs as f64)
}

fn grid_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0..6) as f64 * 4.0;
    let y = rng.random_range(0..6) as f64 * 4.0;
    BBox::new(x, y, x + rng.random_range(2..6) as f64 * 4.0, y + rng.random_range(2..6) as f64 * 4.0).unwrap()
}

fn golden_run(dir: &Path) -> String {
    let cfg = RunConfig::load(None, &["num_scenes=12", "data_seed=3", "epochs=2", "seed=1"].map(String::from)).unwrap();
    let data = dir.join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    let ckpt = dir.join("g.ckpt");
    cmd_train(&cfg, &data, &ckpt, &metrics_path_for(&ckpt), false).unwrap();
    let path = dir.join("g.json");
    cmd_eval(&cfg, &ckpt, &data, Split::Test, &path).unwrap();
    fs::read_to_string(path).unwrap()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let thresholds = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
    let thresholds_ok = coco_thresholds() == thresholds;
    let mut worst: f64 = 0.0;
    let mut presence_mismatch = 0usize;
    let fixtures = 3000;
    for _ in 0..fixtures {
        let images = rng.random_range(1..=3);
        let classes = rng.random_range(1..=3);
        let ids: Vec<String> = (0..images).map(|i| format!("im{}", i)).collect();
        let mut gts: Vec<GroundTruth> = ids
            .iter()
            .map(|id| GroundTruth {
                image_id: id.clone(),
                objects: vec![],
            })
            .collect();
        for _ in 0..rng.random_range(0..=3) {
            let i = rng.random_range(0..images);
            gts[i].objects.push(GtObject {
                bbox: grid_box(&mut rng),
                class: rng.random_range(0..classes),
            });
        }
        let dets: Vec<Detection> = (0..rng.random_range(0..=6))
            .map(|_| {
                let i = rng.random_range(0..images);
                let bbox = if !gts[i].objects.is_empty() && rng.random_bool(0.5) {
                    let o = &gts[i].objects[rng.random_range(0..gts[i].objects.len())];
                    let s = rng.random_range(0..3) as f64 * 2.0;
                    BBox::new(o.bbox.x1 + s, o.bbox.y1, o.bbox.x2 + s, o.bbox.y2).unwrap()
                } else {
                    grid_box(&mut rng)
                };
                Detection {
                    image_id: ids[i].clone(),
                    bbox,
                    class: rng.random_range(0..classes),
                    score: [0.2, 0.5, 0.5, 0.9][rng.random_range(0..4)],
                }
            })
            .collect();
        let mut cmp = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
            (None, None) => {}
            _ => presence_mismatch += 1,
        };
        for &t in &thresholds {
            for k in 0..classes {
                cmp(jlwsod::evalmetrics::average_precision(&dets, &gts, k, t), ap_oracle(&dets, &gts, k, t));
            }
        }
        cmp(mean_ap(&dets, &gts, 0.5), map_oracle(&dets, &gts, 0.5));
        cmp(corloc(&dets, &gts), corloc_oracle(&dets, &gts));
        let coco_o = thresholds.iter().map(|&t| map_oracle(&dets, &gts, t)).collect::<Option<Vec<f64>>>();
        cmp(coco_map(&dets, &gts), coco_o.map(|v| v.iter().sum::<f64>() / v.len() as f64));
    }

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (golden_run(&dir.path().join("a")), golden_run(&dir.path().join("b")));
    let golden = fs::read_to_string(GOLDEN).unwrap_or_default();
    let golden_ok = a == b && a == golden;

    let pass = thresholds_ok && worst <= 1e-12 && presence_mismatch == 0 && golden_ok;
    outcome(
        pass,
        format!(
            "{} fixtures (<=6 dets, <=3 GTs): AP/mAP/CorLoc/coco max diff {:.1e} <= 1e-12, {} presence mismatches; IoU thresholds 0.50:0.05:0.95 {}; golden report {}",
            fixtures,
            worst,
            presence_mismatch,
            yes(thresholds_ok),
            if golden_ok { "byte-identical" } else { "DIFFERS" }
        ),
    )
}

// 6 -------------------------------------------------------------------------

fn ablation_ordering() -> Outcome {
    let cfg = RunConfig::default();
    let t = Instant::now();
    let ds = generate_dataset(&cfg.scene_config(), cfg.num_scenes).unwrap();
    let n_train = (cfg.num_scenes as f64 * cfg.train_fraction).round() as usize;
    let (tr, te) = ds.split_at(n_train);
    let (tr, te) = (tr.filtered(cfg.min_proposal_side).unwrap(), te.filtered(cfg.min_proposal_side).unwrap());
    let a = run_ablation(&cfg, &tr, &te).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let row = |s: char| a.rows.iter().find(|r| r.sub_method == s).unwrap();
    let (ra, re, rf) = (row('A'), row('E'), row('F'));
    let f_ge_e = rf.map50 >= re.map50;
    let f_gt_a = rf.map50 >= ra.map50 + 0.02;
    let cl = rf.corloc >= ra.corloc;
    let table: Vec<String> = a
        .rows
        .iter()
        .map(|r| format!("{} {:.1}/{:.1}", r.sub_method, 100.0 * r.map50, 100.0 * r.corloc))
        .collect();
    outcome(
        f_ge_e && f_gt_a && cl && secs < 900.0,
        format!(
            "median mAP/CorLoc over {} seeds (K={}, D={}, {}/{} scenes): {}; F>=E {}, F>=A+2 {}, CorLoc F>=A {}; {:.0}s < 900s",
            cfg.ablate_seeds.len(),
            cfg.scene.classes,
            cfg.scene.feature_dim,
            tr.len(),
            te.len(),
            table.join(", "),
            yes(f_ge_e),
            yes(f_gt_a),
            yes(cl),
            secs
        ),
    )
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "NO"
    }
}

// 7 -------------------------------------------------------------------------

fn ckpt_bytes(s: &TrainState) -> Vec<u8> {
    let mut b = Vec::new();
    write_checkpoint(&mut b, s).unwrap();
    b
}

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(None, &["epochs=4".to_string()]).unwrap();
    let mut files_same = true;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        let data = root.join("data");
        cmd_gen_data(&cfg, &data).unwrap();
        let ckpt = root.join("m.ckpt");
        cmd_train(&cfg, &data, &ckpt, &metrics_path_for(&ckpt), false).unwrap();
        let rep = root.join("r.json");
        cmd_eval(&cfg, &ckpt, &data, Split::Test, &rep).unwrap();
        outputs.push(
            [data.join(TRAIN_FILE), data.join(TEST_FILE), ckpt.clone(), metrics_path_for(&ckpt), rep]
                .map(|p| fs::read(p).unwrap()),
        );
    }
    files_same &= outputs[0] == outputs[1];

    let ds = load_split(&cfg, &dir.path().join("a/data"), Split::Train).unwrap();
    let (k, d) = ds.dims().unwrap();
    let mut resumed_same = true;
    for (mask, batch) in [('F', 1), ('E', 4), ('A', 1)] {
        let tc = TrainConfig {
            mask: jlwsod::trainer::ModuleMask::sub_method(mask).unwrap(),
            batch_size: batch,
            ..cfg.train.clone()
        };
        let (full, _) = train(&ds, &tc).unwrap();
        let mut st = TrainState::init(k, d, &tc).unwrap();
        train_until(&ds, &tc, &mut st, 2).unwrap();
        let mut st = read_checkpoint(ckpt_bytes(&st).as_slice()).unwrap();
        train_until(&ds, &tc, &mut st, tc.epochs).unwrap();
        resumed_same &= ckpt_bytes(&st) == ckpt_bytes(&full);
    }
    outcome(
        files_same && resumed_same,
        format!(
            "repeated gen-data/train/eval byte-identical: {}; save at epoch 2 + load + continue == uninterrupted (F, E batch 4, A): {}",
            yes(files_same),
            yes(resumed_same)
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 7] = [
        ("gradient correctness", gradient_correctness),
        ("LSE contract", lse_contract),
        ("correlation matrix contract", correlation_contract),
        ("contrastive closed forms", contrastive_closed_forms),
        ("metric oracle equivalence", metric_oracles),
        ("ablation ordering", ablation_ordering),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let mut passed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        passed += usize::from(o.pass);
        println!("[{}] {}. {}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, name, o.detail);
    }
    println!("acceptance: {}/{} criteria passed", passed, criteria.len());
    if passed < criteria.len() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
