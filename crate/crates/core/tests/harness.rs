use std::fs;

use layertrace::harness::{
    inject_label_noise, load_run, make_dataset, phase1_calibrate, phase2_detect, run_ensemble,
    train_with_monitoring, DatasetSpec, DetectOptions, EnsembleSpec, OptimizerConfig, Phase1Options,
    RunConfig, RunStatus, Seeds, RECORD_FILE, SNAPSHOT_FILE,
};

fn config(model: &str) -> RunConfig {
    RunConfig {
        run_id: "t".into(),
        architecture: "mlp-small".into(),
        model: Some(model.into()),
        dataset: DatasetSpec {
            classes: 3,
            train_per_class: 10,
            test_per_class: 5,
            input_dim: 3,
            separation: 2.0,
            spread: 0.5,
            seed: 3,
        },
        eta: 0.0,
        optimizer: OptimizerConfig::default(),
        batch_size: 6,
        epochs: 2,
        snapshot_every: 1,
        probes: 8,
        seeds: Seeds {
            init: 1,
            data_order: 2,
            probes: 3,
            label_noise: 4,
        },
    }
}

const SMALL: &str = "input = 3\nlayer = dense 5 tanh\nlayer = dense 3 identity\n";

#[test]
fn weight_decay_twin_differs_by_two_lambda_p_at_step_zero() {
    let mut plain = config(SMALL);
    plain.optimizer.weight_decay = 0.0;
    let mut decayed = plain.clone();
    decayed.optimizer.weight_decay = 5e-4;
    let a = train_with_monitoring(&plain, None).unwrap();
    let b = train_with_monitoring(&decayed, None).unwrap();
    let (sa, sb) = (&a.snapshots[0], &b.snapshots[0]);
    assert_eq!(sa.step, 0);
    for (l, &p) in a.summary.layer_sizes.iter().enumerate() {
        let shift = sb.traces.estimates[l] - sa.traces.estimates[l];
        let expected = 2.0 * 5e-4 * p as f64;
        assert!((shift - expected).abs() <= 1e-8 * expected, "layer {l}: {shift} vs {expected}");
    }
}

#[test]
fn every_step_is_snapshotted_when_requested() {
    let mut cfg = config(SMALL);
    cfg.dataset.train_per_class = 20;
    cfg.epochs = 1;
    assert_eq!(cfg.total_steps(), 10);
    let rec = train_with_monitoring(&cfg, None).unwrap();
    assert_eq!(rec.snapshots.len(), 10);
    assert!(rec.snapshots.iter().all(|s| s.traces.samples.iter().all(|v| v.len() == 8)));
    assert_eq!(rec.summary.counters.hvps, 80);
}

#[test]
fn linear_model_fits_separable_data() {
    let mut cfg = config("input = 3\nlayer = dense 3 identity\n");
    cfg.dataset.separation = 6.0;
    cfg.dataset.spread = 0.2;
    cfg.epochs = 20;
    cfg.snapshot_every = 10;
    let rec = train_with_monitoring(&cfg, None).unwrap();
    let m = rec.summary.metrics.unwrap();
    assert_eq!(m.train_accuracy, 1.0);
    assert_eq!(m.test_accuracy, 1.0);
}

#[test]
fn label_noise_rate_is_binomial() {
    let spec = DatasetSpec {
        classes: 4,
        train_per_class: 500,
        ..DatasetSpec::default()
    };
    let clean = make_dataset(&spec).unwrap();
    let eta = 0.4;
    let noisy = inject_label_noise(&clean, eta, 9).unwrap();
    let n = noisy.train_len() as f64;
    let sd = (eta * (1.0 - eta) / n).sqrt();
    assert!((noisy.corrupted_fraction() - eta).abs() <= 4.0 * sd);
    for i in 0..noisy.train_len() {
        assert_eq!(noisy.corrupted[i], noisy.train_y[i] != noisy.clean_y[i]);
    }
    assert_eq!(noisy.test_y, clean.test_y);
}

#[test]
fn truncated_run_directory_reloads_a_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(SMALL);
    let full = train_with_monitoring(&cfg, Some(dir.path())).unwrap();
    let reloaded = load_run(dir.path()).unwrap();
    assert_eq!(reloaded.summary, full.summary);
    assert_eq!(reloaded.snapshots, full.snapshots);

    let path = dir.path().join(SNAPSHOT_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() * 2 / 3]).unwrap();
    fs::remove_file(dir.path().join(RECORD_FILE)).unwrap();
    let cut = load_run(dir.path()).unwrap();
    assert_eq!(cut.summary.status, RunStatus::Interrupted);
    assert!(!cut.snapshots.is_empty() && cut.snapshots.len() < full.snapshots.len());
    assert_eq!(cut.snapshots[..], full.snapshots[..cut.snapshots.len()]);
}

#[test]
fn training_is_deterministic() {
    let cfg = config(SMALL);
    let a = train_with_monitoring(&cfg, None).unwrap();
    let b = train_with_monitoring(&cfg, None).unwrap();
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.snapshots, b.snapshots);
}

#[test]
fn phase_one_is_reproducible_and_skips_failed_runs() {
    let mut base = config(SMALL);
    base.run_id = "clean".into();
    base.epochs = 3;
    let ens = EnsembleSpec {
        base: base.clone(),
        etas: vec![0.0],
        seeds: 4,
        first_seed: 0,
    };
    let mut configs = ens.expand();
    let mut broken = base.clone();
    broken.run_id = "broken".into();
    broken.optimizer.learning_rate = 1e200;
    broken.optimizer.cosine = false;
    configs.push(broken);
    let runs: Vec<_> = run_ensemble(&configs, None).into_iter().map(Result::unwrap).collect();
    let opts = Phase1Options {
        arl0: 50.0,
        sequences: 500,
        ..Phase1Options::default()
    };
    let a = phase1_calibrate(&runs, &opts).unwrap();
    let b = phase1_calibrate(&runs, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.excluded, vec!["broken".to_string()]);
    assert_eq!(a.baseline.ensemble_size, 4);
    assert!(phase1_calibrate(&runs[2..], &opts).is_err());

    let table = phase2_detect(&a, &runs[..4], &DetectOptions { bootstrap: 100, ..DetectOptions::default() }).unwrap();
    assert!(table.rows.iter().all(|r| r.loo_control));
    assert_eq!(table.false_alarms().1, 4);
}
