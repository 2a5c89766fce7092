use std::path::Path;

use rili_core::harness::{
    evaluate_run, make_splits, report_tables, run_experiment, synth_dataset, ExperimentConfig, Manifest, SynthConfig,
};
use rili_core::metrics::{subgroup_metrics, Subgroup};
use rili_core::{Regime, TrainConfig};

fn small_dataset(dir: &Path) -> Manifest {
    let cfg = SynthConfig { n_patients: 30, scans_per_patient: (1, 2), seed: 21, ..SynthConfig::default() };
    synth_dataset(&cfg, &dir.join("data")).unwrap()
}

fn quick(regime: Regime, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        train: TrainConfig { max_epochs: 3, early_stop_patience: 2, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    };
    cfg.experiment.regime = regime;
    cfg.experiment.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn run_layout_report_and_subgroups() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let splits = make_splits(&m, 4).unwrap();
    let runs = dir.path().join("runs");
    let mut run_dirs = Vec::new();
    for regime in [Regime::Lora, Regime::Nft, Regime::Fft] {
        let summary = run_experiment(&quick(regime, &runs), &m, &splits).unwrap();
        assert_eq!(summary.histories.len(), 5);
        assert_eq!(summary.result.n_holdout, splits.holdout.len());
        run_dirs.push(summary.dir);
    }

    let lora_dir = &run_dirs[0];
    for f in ["config.json", "splits.json", "timing.json", "metrics.csv", "aggregate.json", "roc_band.csv"] {
        assert!(lora_dir.join(f).is_file(), "missing {f}");
    }
    for k in 0..5 {
        let fold = lora_dir.join(format!("fold_{k}"));
        for f in ["history.jsonl", "best.ckpt", "holdout_scores.csv", "adapters.ckpt"] {
            assert!(fold.join(f).is_file(), "missing fold_{k}/{f}");
        }
    }
    assert!(!run_dirs[1].join("fold_0/adapters.ckpt").exists());

    let metrics = std::fs::read_to_string(lora_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "config,crop_mm,input_mode,regime,roc_auc,f1,precision,recall,specificity,accuracy");
    assert_eq!(lines.len(), 1 + 5 + 2);
    assert!(lines[6].starts_with("toy-vit/mean,50,orthogonal,LoRA,"));
    assert!(lines[7].starts_with("toy-vit/std,"));

    // evaluation is a pure function of the stored scores
    let before = std::fs::read(lora_dir.join("aggregate.json")).unwrap();
    evaluate_run(lora_dir).unwrap();
    assert_eq!(std::fs::read(lora_dir.join("aggregate.json")).unwrap(), before);

    let band = std::fs::read_to_string(lora_dir.join("roc_band.csv")).unwrap();
    assert_eq!(band.lines().count(), 1 + 101);

    let tables = dir.path().join("tables");
    report_tables(&run_dirs, &tables).unwrap();
    let table = std::fs::read_to_string(tables.join("table_toy-vit.csv")).unwrap();
    let order: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(order, ["NFT", "FFT", "LoRA"]);
    let first = table.lines().nth(1).unwrap();
    assert_eq!(first.split(',').count(), 3 + 6);
    assert!(first
        .split(',')
        .skip(3)
        .all(|c| c.contains('±') && c.split('±').all(|v| v.split('.').nth(1).unwrap().len() == 3)));
    let params = std::fs::read_to_string(tables.join("params_time.csv")).unwrap();
    assert_eq!(params.lines().count(), 4);

    // subgroup evaluation on the holdout scores of fold 0
    let scores_csv = std::fs::read_to_string(lora_dir.join("fold_0/holdout_scores.csv")).unwrap();
    let mut rows = Vec::new();
    let mut scores = Vec::new();
    for line in scores_csv.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        rows.push(m.row(parts[0]).unwrap().clone());
        scores.push(parts[2].parse::<f64>().unwrap());
    }
    let early = subgroup_metrics(&rows, &scores, &Subgroup::early_followup(), 0.5).unwrap();
    assert_eq!(early.n_samples, rows.iter().filter(|r| r.months_post_sbrt.unwrap() <= 3.0).count());
    let none = subgroup_metrics(&rows, &scores, &Subgroup::MaxNoduleCm(0.1), 0.5);
    assert!(none.unwrap_err().to_string().contains("no samples"));
}

#[test]
fn leaking_splits_are_refused_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let mut splits = make_splits(&m, 1).unwrap();
    let moved = splits.holdout[0].clone();
    splits.folds[0].val.push(moved);
    let err = run_experiment(&quick(Regime::Nft, &dir.path().join("runs")), &m, &splits).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn missing_volume_is_an_io_error_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path());
    let splits = make_splits(&m, 2).unwrap();
    let victim = &splits.holdout[0];
    std::fs::remove_file(dir.path().join("data/volumes").join(format!("{victim}.raw"))).unwrap();
    let err = run_experiment(&quick(Regime::Nft, &dir.path().join("runs")), &m, &splits).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains(victim.as_str()), "{err}");
}
