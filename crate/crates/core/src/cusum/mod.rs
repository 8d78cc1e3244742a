//! Phase-I baselines, the two-sided CUSUM chart and its threshold calibration.

mod baseline;
mod calibrate;
mod chart;
mod effect;

pub use baseline::{
    build_baseline, default_sigma_floor, loo_residuals, Baseline, Trajectory, SIGMA_FLOOR_ABS,
    SIGMA_FLOOR_REL,
};
pub use calibrate::{
    average_run_length, calibrate_threshold, false_alarm_probability, false_alarms_within,
    run_lengths, Calibration, CalibrationConfig, ResidualSource, H_BRACKET, MAX_BISECTION_STEPS,
    RUN_LENGTH_CAP_FACTOR,
};
pub use chart::{detect, CusumEntry, CusumState, Detection};
pub use effect::{autocorr_lag1, cohens_d, Autocorrelation, EffectSize, Estimate, BOOTSTRAP_REPLICATES};
