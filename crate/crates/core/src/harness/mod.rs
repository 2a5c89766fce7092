//! Study orchestration: manifests, patient-level splits, synthetic data,
//! grid runs and reporting.

pub mod experiment;
mod manifest;
pub mod report;
pub mod splits;
pub mod synth;

pub use experiment::{
    evaluate_run, full_grid, prepare_examples, run_experiment, ExperimentConfig, GridCell, RunAggregate, RunSummary,
    RunTiming,
};
pub use manifest::{Manifest, ManifestRow, MANIFEST_COLUMNS};
pub use report::{param_table, report_tables, ParamRow};
pub use splits::{make_splits, validate_splits, Fold, SplitSpec};
pub use synth::{synth_dataset, LesionPlacement, SynthConfig};
