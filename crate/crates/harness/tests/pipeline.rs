//! End-to-end pipeline checks on the toy bar dataset: the experiment runner
//! is deterministic, learns the toy task, and writes the full report bundle.

use std::path::Path;

use firm::dataset::Layout;
use firm::experiment::{
    run_experiment, DatasetConfig, ExperimentConfig, OutlierSource, OutlierTagging, ScoreKind,
};
use firm::toy::{write_toy_dataset, ToyParams};
use firm_core::batch::PositiveSetPolicy;
use firm_core::encoder::{Arch, EncoderConfig, TrainConfig};
use firm_core::scoring::ScoreConfig;

fn toy_config(root: &Path, output: &Path, epochs: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig {
            root: root.to_path_buf(),
            layout: Layout::MvTec,
            resolution: 16,
        },
        outlier_source: OutlierSource::Rotations,
        outlier_tagging: OutlierTagging::PerGroup,
        policy: PositiveSetPolicy::Firm,
        encoder: EncoderConfig {
            arch: Arch::MlpSmall,
            input: (16, 16, 1),
            d: 32,
            d_head: 16,
            head_hidden: 2,
            head_width: 64,
            head_norm: true,
        },
        train: TrainConfig {
            epochs,
            warmup_epochs: (epochs / 10).max(1),
            peak_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0003,
            batch_pairs: 16,
            temperature: 0.2,
            seed,
        },
        scores: vec![ScoreKind::Con],
        score: ScoreConfig::default(),
        patch: None,
        foreground: Default::default(),
        eval_stride: 10,
        seed,
        output: output.to_path_buf(),
    }
}

#[test]
fn toy_experiment_learns_and_writes_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_toy_dataset(&data, &ToyParams::default()).unwrap();
    let out = dir.path().join("out");
    let cfg = toy_config(&data, &out, 120, 1);
    let report = run_experiment(&cfg).unwrap();
    eprintln!(
        "toy 120-epoch firm: auroc {:?}, aulc {:.3}",
        report.score_aurocs, report.aulc
    );
    assert!(report.score_aurocs["con"] > 0.75, "{:?}", report.score_aurocs);
    // training moved the curve
    assert!(
        report.curve.aurocs.last().unwrap() > report.curve.aurocs.first().unwrap(),
        "curve {:?}",
        report.curve
    );
    for file in ["report.json", "scores.csv", "curve.csv", "curve.svg", "model.firm"] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    // losses stay finite and the curve is recorded from epoch 0
    assert_eq!(report.curve.epochs[0], 0);
    assert_eq!(*report.curve.epochs.last().unwrap(), 120);
    assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn config_validation_runs_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(&dir.path().join("missing"), &dir.path().join("out"), 10, 1);
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.downcast_ref::<firm::ConfigError>().is_some());
    assert!(!dir.path().join("out").exists(), "no partial outputs");
}

#[test]
fn unknown_config_keys_rejected() {
    let json = r#"{"dataset": {"root": ".", "layout": "mv-tec", "resolution": 16}, "bogus": 1}"#;
    let err = ExperimentConfig::from_json(json).unwrap_err();
    assert!(err.downcast_ref::<firm::ConfigError>().is_some());
}
