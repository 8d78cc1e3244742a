//! Synthetic data, monitored training and the two-phase detection pipeline.

mod dataset;
mod pipeline;
mod train;

pub use dataset::{inject_label_noise, make_dataset, Dataset, DatasetSpec};
pub use pipeline::{
    default_window, phase1_calibrate, phase2_detect, run_ensemble, sensitivity_sweep, trajectory,
    DetectOptions, DetectionCell, DetectionRow, DetectionTable, EnsembleSpec, MonitorLayer,
    Phase1Artifact, Phase1Options, SweepCell, SweepReport,
};
pub use train::{
    load_run, train_with_monitoring, Counters, FinalMetrics, OptimizerConfig, RunConfig,
    RunRecord, RunStatus, RunSummary, Seeds, write_json, CONFIG_FILE, META_FILE, RECORD_FILE, SNAPSHOT_FILE,
};
