use jlwsod::datamodel::{generate_dataset, Dataset, SceneConfig, MIN_PROPOSAL_SIDE};
use jlwsod::trainer::{
    load_checkpoint, read_checkpoint, save_checkpoint, train, train_until, write_checkpoint, ModuleMask, TrainConfig,
    TrainState,
};

fn benchmark_train_split() -> Dataset {
    let ds = generate_dataset(&SceneConfig::default(), 250).unwrap();
    ds.split_at(200).0.filtered(MIN_PROPOSAL_SIDE).unwrap()
}

fn small(n: usize) -> Dataset {
    let cfg = SceneConfig {
        seed: 19,
        ..SceneConfig::default()
    };
    generate_dataset(&cfg, n).unwrap().filtered(MIN_PROPOSAL_SIDE).unwrap()
}

fn bytes(s: &TrainState) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, s).unwrap();
    buf
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let ds = small(12);
    for mask in ['A', 'E', 'F'] {
        let cfg = TrainConfig {
            mask: ModuleMask::sub_method(mask).unwrap(),
            epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let (a, ma) = train(&ds, &cfg).unwrap();
        let (b, mb) = train(&ds, &cfg).unwrap();
        assert_eq!(bytes(&a), bytes(&b), "sub-method {}", mask);
        assert_eq!(ma, mb);
        let other = TrainConfig { seed: 6, ..cfg };
        assert_ne!(bytes(&train(&ds, &other).unwrap().0), bytes(&a));
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let ds = small(12);
    let dir = tempfile::tempdir().unwrap();
    for (mask, batch) in [('F', 1), ('E', 3)] {
        let cfg = TrainConfig {
            mask: ModuleMask::sub_method(mask).unwrap(),
            epochs: 5,
            batch_size: batch,
            seed: 8,
            corr_sem_rate: if batch == 1 { 0.0 } else { 0.05 },
            ..TrainConfig::default()
        };
        let (full, full_metrics) = train(&ds, &cfg).unwrap();

        let (k, d) = ds.dims().unwrap();
        let mut state = TrainState::init(k, d, &cfg).unwrap();
        let mut metrics = train_until(&ds, &cfg, &mut state, 2).unwrap();
        let path = dir.path().join(format!("{}.ckpt", mask));
        save_checkpoint(&path, &state).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        assert_eq!(resumed, state);
        metrics.extend(train_until(&ds, &cfg, &mut resumed, cfg.epochs).unwrap());

        assert_eq!(bytes(&resumed), bytes(&full));
        assert_eq!(metrics, full_metrics);
        assert_eq!(read_checkpoint(bytes(&full).as_slice()).unwrap(), full);
    }
}

#[test]
fn resuming_with_a_different_mask_is_rejected() {
    let ds = small(4);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (mut s, _) = train(&ds, &cfg).unwrap();
    let other = TrainConfig {
        mask: ModuleMask::sub_method('A').unwrap(),
        epochs: 2,
        ..cfg
    };
    assert!(train_until(&ds, &other, &mut s, 2).is_err());
}

#[test]
fn loss_falls_over_first_five_epochs() {
    let ds = benchmark_train_split();
    let mut good = 0;
    let mut curves = Vec::new();
    for seed in 0..5 {
        let cfg = TrainConfig {
            epochs: 5,
            seed,
            ..TrainConfig::default()
        };
        let (_, m) = train(&ds, &cfg).unwrap();
        let curve: Vec<f64> = m.iter().map(|r| r.loss_total).collect();
        if curve.windows(2).all(|w| w[1] <= w[0]) {
            good += 1;
        }
        curves.push(curve);
    }
    assert!(good >= 4, "non-increasing in {} of 5 seeds: {:?}", good, curves);
}

#[test]
fn contrastive_loss_decreases_with_training() {
    let ds = small(20);
    for mask in ['C', 'D', 'F'] {
        let cfg = TrainConfig {
            mask: ModuleMask::sub_method(mask).unwrap(),
            epochs: 6,
            seed: 1,
            lr_schedule: vec![(0.0, 1e-2)],
            ..TrainConfig::default()
        };
        let (_, m) = train(&ds, &cfg).unwrap();
        let (first, last) = (m[0].loss_igcl, m[m.len() - 1].loss_igcl);
        assert!(last < first, "sub-method {}: {} -> {}", mask, first, last);
    }
}
