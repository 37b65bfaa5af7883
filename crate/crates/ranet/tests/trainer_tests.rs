mod common;

use ranet::builder::build_graph;
use ranet::config::{default_step_mode, load_preset};
use ranet::data::{synthesize_dataset, Dataset, LabeledImage};
use ranet::tensor::{ParamRole, ParamStore, Tensor};
use ranet::trainer::{
    load_checkpoint, lr_at_epoch, save_checkpoint, sgd_momentum_step, train,
    verify_checkpoint_matches, OptimizerState, TrainConfig,
};

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 0.05,
        lr_milestones: vec![1],
        augment: false,
        seed: 3,
        ..TrainConfig::default()
    }
}

/// Tiny 8x8 shapes matching the mini preset's input size.
fn tiny_data() -> (Dataset, Dataset) {
    let ds = synthesize_dataset(11, 12, 8, 0.2).unwrap();
    ds.split_holdout(16).unwrap()
}

#[test]
fn lr_schedule_steps_at_milestones() {
    let cfg = TrainConfig {
        epochs: 10,
        learning_rate: 0.1,
        lr_milestones: vec![3, 6],
        lr_factor: 0.1,
        ..TrainConfig::default()
    };
    assert!((lr_at_epoch(&cfg, 0) - 0.1).abs() < 1e-9);
    assert!((lr_at_epoch(&cfg, 2) - 0.1).abs() < 1e-9);
    assert!((lr_at_epoch(&cfg, 3) - 0.01).abs() < 1e-9);
    assert!((lr_at_epoch(&cfg, 6) - 0.001).abs() < 1e-9);
    assert!((lr_at_epoch(&cfg, 9) - 0.001).abs() < 1e-9);
}

#[test]
fn sgd_momentum_hand_example() {
    let mut store = ParamStore::new();
    let id = store.add(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap(), ParamRole::LinearBias);
    store.get_mut(id).grad[0] = 0.5;
    let mut state = OptimizerState::for_store(&store);
    // v = 0.9*0 + (0.5 + 0.1*1.0) = 0.6; p = 1.0 - 0.2*0.6 = 0.88
    sgd_momentum_step(&mut store, &mut state, 0.2, 0.9, 0.1);
    assert!((store.get(id).value.data()[0] - 0.88).abs() < 1e-6);
    // second step, same grad: v = 0.9*0.6 + (0.5 + 0.1*0.88) = 1.128
    store.get_mut(id).grad[0] = 0.5;
    sgd_momentum_step(&mut store, &mut state, 0.2, 0.9, 0.1);
    assert!((store.get(id).value.data()[0] - (0.88 - 0.2 * 1.128)).abs() < 1e-5);
}

#[test]
fn train_config_invariants_enforced() {
    let base = quick_cfg();
    assert!(base.validate().is_ok());
    for bad in [
        TrainConfig { batch_size: 1, ..base.clone() },
        TrainConfig { epochs: 0, ..base.clone() },
        TrainConfig { lr_milestones: vec![5], epochs: 2, ..base.clone() },
        TrainConfig { lr_milestones: vec![1, 1], epochs: 5, ..base.clone() },
        TrainConfig { lr_factor: 1.0, ..base.clone() },
        TrainConfig { learning_rate: 0.0, ..base.clone() },
        TrainConfig { loss_weights: vec![1.0, -1.0], ..base.clone() },
    ] {
        assert!(bad.validate().is_err(), "{:?} accepted", bad);
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let cfg = load_preset("mini", default_step_mode("mini")).unwrap();
    let (train_set, val_set) = tiny_data();
    let tcfg = TrainConfig { epochs: 3, ..quick_cfg() };

    let run = || {
        let graph = build_graph(&cfg, 7).unwrap();
        let mut store = graph.params.clone();
        let report = train(&graph, &mut store, &train_set, &val_set, &tcfg).unwrap();
        (store, report)
    };
    let (store_a, report_a) = run();
    let (store_b, report_b) = run();

    let first = report_a.epochs.first().unwrap().train_loss;
    let last = report_a.epochs.last().unwrap().train_loss;
    assert!(last < first, "loss did not drop: {} -> {}", first, last);

    for i in 0..store_a.len() {
        assert_eq!(store_a.get(i).value.data(), store_b.get(i).value.data(), "param {}", i);
    }
    assert_eq!(report_a.to_csv(), report_b.to_csv());
}

#[test]
fn train_log_csv_layout() {
    let cfg = load_preset("mini", default_step_mode("mini")).unwrap();
    let graph = build_graph(&cfg, 1).unwrap();
    let mut store = graph.params.clone();
    let (train_set, val_set) = tiny_data();
    let report = train(&graph, &mut store, &train_set, &val_set, &quick_cfg()).unwrap();
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "epoch,lr,train_loss,val_acc_1,val_acc_2,val_acc_3");
}

#[test]
fn checkpoint_round_trip_bit_exact() {
    let cfg = load_preset("mini", default_step_mode("mini")).unwrap();
    let graph = build_graph(&cfg, 4).unwrap();
    let mut store = graph.params.clone();
    // perturb running stats so they are exercised by the round trip
    store.stats_mut(0).mean[0] = 0.25;
    store.stats_mut(0).var[0] = 2.5;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&path, &cfg, &store, &[0.5, 0.6, 0.7]).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.config, cfg);
    assert_eq!(ckpt.final_val_accuracy, vec![0.5, 0.6, 0.7]);
    assert_eq!(ckpt.store.len(), store.len());
    for i in 0..store.len() {
        let (a, b) = (store.get(i), ckpt.store.get(i));
        assert_eq!(a.role, b.role);
        assert_eq!(a.value.shape(), b.value.shape());
        assert_eq!(a.value.data(), b.value.data());
    }
    for i in 0..store.num_stats() {
        assert_eq!(store.stats(i).mean, ckpt.store.stats(i).mean);
        assert_eq!(store.stats(i).var, ckpt.store.stats(i).var);
    }
    verify_checkpoint_matches(&graph, &ckpt.store).unwrap();
}

#[test]
fn checkpoint_rejects_garbage_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("junk.bin");
    std::fs::write(&bad, b"not a checkpoint at all").unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(ranet::Error::Format(_))));

    let truncated = dir.path().join("trunc.bin");
    std::fs::write(&truncated, b"RANETCK1\xff\xff").unwrap();
    assert!(load_checkpoint(&truncated).is_err());

    // structural mismatch against a different graph
    let mini = load_preset("mini", default_step_mode("mini")).unwrap();
    let other = load_preset("model-c-1-mini", default_step_mode("model-c-1-mini")).unwrap();
    let g1 = build_graph(&mini, 0).unwrap();
    let g2 = build_graph(&other, 0).unwrap();
    assert!(verify_checkpoint_matches(&g1, &g2.params).is_err());
}

#[test]
fn empty_training_set_rejected() {
    let cfg = load_preset("mini", default_step_mode("mini")).unwrap();
    let graph = build_graph(&cfg, 0).unwrap();
    let mut store = graph.params.clone();
    let empty = Dataset::default();
    let (_, val) = tiny_data();
    assert!(train(&graph, &mut store, &empty, &val, &quick_cfg()).is_err());
}

#[test]
fn divergence_is_reported_not_masked() {
    let cfg = load_preset("mini", default_step_mode("mini")).unwrap();
    let graph = build_graph(&cfg, 0).unwrap();
    let mut store = graph.params.clone();
    // poison one weight so the forward pass goes non-finite
    store.get_mut(0).value.data_mut()[0] = f32::NAN;
    let (train_set, val_set) = tiny_data();
    match train(&graph, &mut store, &train_set, &val_set, &quick_cfg()) {
        Err(ranet::Error::Diverged { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected divergence error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn labels_out_of_range_surface_as_data_error() {
    let cfg = load_preset("mini", default_step_mode("mini")).unwrap();
    let graph = build_graph(&cfg, 0).unwrap();
    let mut store = graph.params.clone();
    let (mut train_set, val_set) = tiny_data();
    train_set.samples.push(LabeledImage {
        image: train_set.samples[0].image.clone(),
        label: 99,
    });
    // batch containing the bad label must fail, not silently clamp
    let res = train(&graph, &mut store, &train_set, &val_set, &quick_cfg());
    assert!(matches!(res, Err(ranet::Error::Data(_))));
}
