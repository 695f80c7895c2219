mod common;

use common::*;
use dpap::harness::checkpoint::Checkpoint;
use dpap::harness::metrics::read_csv;
use dpap::harness::{
    compare_runs, load_split, CsvSink, ExperimentConfig, Phase, PhaseLog, Precision, RunMetrics,
    Trainer,
};

fn run<S: dpap::Scalar>(cfg: &ExperimentConfig) -> Trainer<S> {
    let (train, test) = load_split::<S>(cfg).unwrap();
    let mut t = Trainer::<S>::new(cfg.clone()).unwrap();
    t.run(&train, &test, &mut (), None).unwrap();
    t
}

#[test]
fn zero_epochs_gives_only_the_initial_row() {
    let cfg = ExperimentConfig { epochs: 0, ..small_config() };
    let t = run::<f32>(&cfg);
    assert_eq!(t.metrics.rows.len(), 1);
    assert_eq!(t.metrics.rows[0].epoch, 0);
    assert!(t.metrics.rows[0].train_loss.is_nan());
    assert_eq!(t.metrics.rows[0].retained_params, t.metrics.total_params);
}

#[test]
fn dense_run_never_prunes() {
    let cfg = ExperimentConfig { dpap: false, ..small_config() };
    let t = run::<f32>(&cfg);
    assert_eq!(t.metrics.rows.len(), 4);
    assert!(t.metrics.rows.iter().all(|r| r.retained_params == t.metrics.total_params));
    assert!(t.metrics.rows.iter().all(|r| r.theta_mean == 0.0));
    assert!(t.metrics.events.is_empty());
    assert!(t.plasticity.is_none() && t.pruner.is_none());
}

#[test]
fn phases_run_in_order() {
    let cfg = ExperimentConfig { epochs: 2, ..small_config() };
    let (train, test) = load_split::<f32>(&cfg).unwrap();
    let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
    let mut log = PhaseLog::default();
    t.run(&train, &test, &mut log, None).unwrap();
    let batches = cfg.train_size / cfg.batch_size;
    let mut want = vec![(0, Phase::Evaluate)];
    for e in 0..2 {
        for _ in 0..batches {
            want.extend([Phase::Forward, Phase::Backward, Phase::WeightUpdate, Phase::BatchPlasticity].map(|p| (e, p)));
        }
        want.extend([Phase::EpochImportance, Phase::SurvivalUpdate, Phase::Prune, Phase::Evaluate].map(|p| (e, p)));
    }
    assert_eq!(log.0, want);
}

#[test]
fn identical_runs_write_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let mut texts = Vec::new();
    for k in 0..2 {
        let path = dir.path().join(format!("m{k}.csv"));
        let (train, test) = load_split::<f32>(&cfg).unwrap();
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        let mut sink = CsvSink::create(&path).unwrap();
        t.run(&train, &test, &mut (), Some(&mut sink)).unwrap();
        drop(sink);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, t.metrics.to_csv_string());
        texts.push(text);
    }
    assert_eq!(texts[0], texts[1]);
    let rows = read_csv(&dir.path().join("m0.csv")).unwrap();
    assert_eq!(rows.len(), cfg.epochs + 1);
}

#[test]
fn different_seeds_differ() {
    let a = run::<f32>(&small_config());
    let b = run::<f32>(&ExperimentConfig { seed: 2, ..small_config() });
    assert_ne!(a.metrics.to_csv_string(), b.metrics.to_csv_string());
}

#[test]
fn resume_from_checkpoint_is_bit_exact_in_f64() {
    let cfg = ExperimentConfig {
        precision: Precision::F64,
        epochs: 4,
        epsilon: 1.2,
        ..small_config()
    };
    let straight = run::<f64>(&cfg);
    assert!(!straight.metrics.events.is_empty(), "nothing pruned, resume test is weak");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let (train, test) = load_split::<f64>(&cfg).unwrap();
    let mut first = Trainer::<f64>::new(ExperimentConfig { epochs: 2, ..cfg.clone() }).unwrap();
    first.run(&train, &test, &mut (), None).unwrap();
    first.to_checkpoint().save(&path).unwrap();
    drop(first);

    let mut resumed = Trainer::<f64>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.config.epochs = 4;
    resumed.run(&train, &test, &mut (), None).unwrap();

    assert_eq!(resumed.metrics.to_csv_string(), straight.metrics.to_csv_string());
    assert_eq!(resumed.metrics.events, straight.metrics.events);
    assert_eq!(resumed.net(), straight.net());
    assert_eq!(resumed.to_checkpoint().to_bytes(), straight.to_checkpoint().to_bytes());
}

#[test]
fn checkpoint_round_trip_preserves_every_byte() {
    let t = run::<f32>(&ExperimentConfig { epochs: 1, ..small_config() });
    let bytes = t.to_checkpoint().to_bytes();
    let back = Trainer::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    // wrong precision is refused
    assert!(Trainer::<f64>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).is_err());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let t = run::<f32>(&ExperimentConfig { epochs: 1, ..small_config() });
    let bytes = t.to_checkpoint().to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&magic).is_err());
    let mut version = bytes.clone();
    version[8] = version[8].wrapping_add(1);
    assert!(Checkpoint::from_bytes(&version).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());

    // structurally valid file missing a layer
    let mut c = Checkpoint::from_bytes(&bytes).unwrap();
    c.arrays.retain(|a| !a.name.starts_with("layer0.weight"));
    assert!(Trainer::<f32>::from_checkpoint(&c).is_err());

    let dir = tempfile::tempdir().unwrap();
    assert!(Checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn pruning_run_keeps_masks_and_silence() {
    let cfg = ExperimentConfig { epochs: 5, epsilon: 1.3, ..small_config() };
    let (train, test) = load_split::<f32>(&cfg).unwrap();
    let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
    t.initial_row(&test, &mut (), None).unwrap();
    let mut prev = t.net().masks();
    for _ in 0..cfg.epochs {
        t.train_epoch(&train, &test, &mut (), None).unwrap();
        let now = t.net().masks();
        for (a, b) in now.iter().zip(&prev) {
            assert!(mask_is_subset(a, b));
        }
        assert!(t.net().masked_entries_are_zero());
        prev = now;
    }
    assert!(t.metrics.final_pruning_rate() > 0.0);
    assert!(t.metrics.events.iter().any(|e| e.kind == dpap::pruner::ElementKind::Neuron));
    assert_eq!(t.metrics.silent_violations, 0);
    assert_eq!(t.metrics.mask_violations, 0);
    for w in t.metrics.per_layer_retained.windows(2) {
        assert!(w[1].iter().zip(&w[0]).all(|(a, b)| a <= b));
    }
    for e in &t.metrics.events {
        assert!(e.f_at < 0.0);
    }
}

#[test]
fn run_directory_round_trip_and_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let dense = run::<f32>(&ExperimentConfig { dpap: false, ..small_config() });
    let pruned = run::<f32>(&small_config());
    dense.metrics.write_dir(&dir.path().join("a")).unwrap();
    pruned.metrics.write_dir(&dir.path().join("b")).unwrap();
    let a = RunMetrics::read_dir(&dir.path().join("a")).unwrap();
    let b = RunMetrics::read_dir(&dir.path().join("b")).unwrap();
    assert_eq!(a.to_csv_string(), dense.metrics.to_csv_string());
    let report = compare_runs(&a, &b, None).unwrap();
    assert!(report.to_text().contains("speedup"));
    let other = run::<f32>(&ExperimentConfig { seed: 9, epochs: 1, ..small_config() });
    assert!(compare_runs(&a, &other.metrics, None).is_err());
}

#[test]
fn data_root_comes_from_the_environment() {
    let cfg = ExperimentConfig { data_root: None, ..small_config() };
    std::env::set_var(dpap::harness::DATA_ROOT_ENV, data_root());
    assert_eq!(cfg.resolve_data_root(), data_root());
    assert!(load_split::<f32>(&cfg).is_ok());
    std::env::set_var(dpap::harness::DATA_ROOT_ENV, "/nonexistent/dpap");
    assert!(load_split::<f32>(&cfg).is_err());
    std::env::remove_var(dpap::harness::DATA_ROOT_ENV);
}
