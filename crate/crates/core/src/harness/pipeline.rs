use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{train_with_monitoring, RunConfig, RunRecord};
use crate::cusum::{
    self, autocorr_lag1, build_baseline, calibrate_threshold, cohens_d, false_alarm_probability,
    loo_residuals, Autocorrelation, Baseline, Calibration, CalibrationConfig, EffectSize,
    ResidualSource, Trajectory,
};
use crate::error::{Error, Result};
use crate::stats::{self, Interval};

/// Which per-layer trajectory feeds the detector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MonitorLayer {
    /// The last (classification-head) layer.
    #[default]
    Head,
    Layer(usize),
    /// Sum of all layer traces.
    Sum,
}

impl FromStr for MonitorLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Self::Head),
            "sum" => Ok(Self::Sum),
            n => n
                .parse()
                .map(Self::Layer)
                .map_err(|_| Error::InvalidArgument(format!("layer must be `head`, `sum` or an index, got `{s}`"))),
        }
    }
}

impl fmt::Display for MonitorLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Head => f.write_str("head"),
            Self::Sum => f.write_str("sum"),
            Self::Layer(l) => write!(f, "{l}"),
        }
    }
}

impl Serialize for MonitorLayer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MonitorLayer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The monitored statistic of one run along its snapshot steps.
pub fn trajectory(run: &RunRecord, layer: MonitorLayer) -> Result<Trajectory> {
    let layers = run.summary.layer_names.len();
    let pick = |est: &[f64]| -> Result<f64> {
        match layer {
            MonitorLayer::Head => est.last().copied().ok_or(Error::InvalidLayer { layer: 0, layers: 0 }),
            MonitorLayer::Sum => Ok(est.iter().sum()),
            MonitorLayer::Layer(l) => est.get(l).copied().ok_or(Error::InvalidLayer { layer: l, layers }),
        }
    };
    let values = run
        .snapshots
        .iter()
        .map(|s| pick(&s.traces.estimates))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(run.run_id(), run.snapshots.iter().map(|s| s.step).collect(), values)
}

/// Trains every configuration in parallel, each into `out/<run_id>` when given.
pub fn run_ensemble(configs: &[RunConfig], out: Option<&Path>) -> Vec<Result<RunRecord>> {
    configs
        .par_iter()
        .map(|c| train_with_monitoring(c, out.map(|d| d.join(&c.run_id)).as_deref()))
        .collect()
}

/// A base configuration replicated over noise levels and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub base: RunConfig,
    pub etas: Vec<f64>,
    /// Seeds per noise level; seed `i` of every level shares its initialisation.
    pub seeds: usize,
    #[serde(default)]
    pub first_seed: u64,
}

impl EnsembleSpec {
    pub fn expand(&self) -> Vec<RunConfig> {
        let mut out = Vec::with_capacity(self.etas.len() * self.seeds);
        for &eta in &self.etas {
            for i in 0..self.seeds as u64 {
                let s = self.first_seed + i;
                let mut c = self.base.clone();
                c.run_id = format!("{}-eta{eta:.2}-s{s}", self.base.run_id);
                c.eta = eta;
                c.seeds.init = self.base.seeds.init.wrapping_add(s);
                c.seeds.data_order = self.base.seeds.data_order.wrapping_add(s);
                c.seeds.probes = self.base.seeds.probes.wrapping_add(s);
                c.seeds.label_noise = self.base.seeds.label_noise.wrapping_add(s);
                out.push(c);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Options {
    pub k: f64,
    pub arl0: f64,
    pub tolerance: f64,
    /// Simulated sequences per ARL₀ evaluation.
    pub sequences: usize,
    pub seed: u64,
    pub layer: MonitorLayer,
    pub sigma_floor: Option<f64>,
}

impl Default for Phase1Options {
    fn default() -> Self {
        Self {
            k: 0.5,
            arl0: 1000.0,
            tolerance: 0.05,
            sequences: 2000,
            seed: 0,
            layer: MonitorLayer::Head,
            sigma_floor: None,
        }
    }
}

/// Calibrated detector plus the clean trajectories it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Artifact {
    pub layer: MonitorLayer,
    #[serde(flatten)]
    pub baseline: Baseline,
    #[serde(flatten)]
    pub calibration: Calibration,
    /// 1-based epoch of every grid step.
    pub epochs: Vec<usize>,
    pub total_epochs: usize,
    pub excluded: Vec<String>,
    /// Lag-1 autocorrelation of the leave-one-out residuals.
    pub autocorrelation: Autocorrelation,
    pub members: Vec<Trajectory>,
}

impl Phase1Artifact {
    pub fn horizon(&self) -> usize {
        self.baseline.grid.len()
    }

    fn epoch_at(&self, step: u64) -> Option<usize> {
        self.baseline.grid.iter().position(|&g| g == step).map(|i| self.epochs[i])
    }
}

/// Baseline from completed clean runs and `h` calibrated on their pooled
/// leave-one-out residuals. Failed runs are dropped with a warning as long as
/// three remain.
pub fn phase1_calibrate(runs: &[RunRecord], opts: &Phase1Options) -> Result<Phase1Artifact> {
    let mut excluded = Vec::new();
    let mut kept = Vec::new();
    for r in runs {
        if r.is_completed() {
            kept.push(r);
        } else {
            log::warn!("excluding run {} from the baseline: {:?}", r.run_id(), r.summary.status);
            excluded.push(r.run_id().to_string());
        }
    }
    if kept.len() < 3 {
        return Err(Error::InsufficientRuns {
            needed: 3,
            got: kept.len(),
        });
    }
    let members = kept
        .iter()
        .map(|r| trajectory(r, opts.layer))
        .collect::<Result<Vec<_>>>()?;
    let baseline = build_baseline(&members, opts.sigma_floor)?;
    let source = ResidualSource::leave_one_out(&members, opts.sigma_floor)?;
    let calibration = calibrate_threshold(
        &source,
        &CalibrationConfig {
            k: opts.k,
            arl0_target: opts.arl0,
            tolerance: opts.tolerance,
            sequences: opts.sequences,
            seed: opts.seed,
        },
    )?;
    if !calibration.converged {
        log::warn!(
            "calibration stopped at ARL0 {:.1} for target {}",
            calibration.arl0_achieved,
            opts.arl0
        );
    }
    let autocorrelation = autocorr_lag1(&loo_residuals(&members, opts.sigma_floor)?, 2000, opts.seed);
    let epochs = kept[0].snapshots.iter().map(|s| s.epoch).collect();
    Ok(Phase1Artifact {
        layer: opts.layer,
        baseline,
        calibration,
        epochs,
        total_epochs: kept[0].summary.config.epochs,
        excluded,
        autocorrelation,
        members,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub run_id: String,
    pub eta: f64,
    pub alarmed: bool,
    pub detection_step: Option<u64>,
    pub detection_epoch: Option<usize>,
    pub max_statistic: f64,
    pub snapshots: usize,
    /// Standardized against the baseline without this run.
    pub loo_control: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionCell {
    pub eta: f64,
    pub runs: usize,
    pub alerts: usize,
    pub alert_rate: f64,
    pub alert_ci: Interval,
    /// Over alarmed runs only.
    pub detection_epoch_mean: Option<f64>,
    pub detection_epoch_std: Option<f64>,
    pub h: f64,
    /// `1 − exp(−T/ARL₀)` for the grid horizon `T`.
    pub false_alarm_theory: f64,
    pub effect: Option<EffectSize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionTable {
    pub layer: MonitorLayer,
    pub k: f64,
    pub h: f64,
    pub arl0: f64,
    pub horizon: usize,
    pub window: (usize, usize),
    pub rows: Vec<DetectionRow>,
    pub cells: Vec<DetectionCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    /// Inclusive 1-based epoch window for effect sizes; default the middle third.
    pub window: Option<(usize, usize)>,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            window: None,
            bootstrap: cusum::BOOTSTRAP_REPLICATES,
            seed: 0,
        }
    }
}

/// Middle third of `epochs`, at least one epoch wide.
pub fn default_window(epochs: usize) -> (usize, usize) {
    let lo = epochs / 3 + 1;
    let hi = (2 * epochs / 3).max(lo);
    (lo, hi.min(epochs.max(1)))
}

fn window_mean(art: &Phase1Artifact, traj: &Trajectory, window: (usize, usize)) -> Option<f64> {
    let vals: Vec<f64> = traj
        .steps
        .iter()
        .zip(&traj.values)
        .filter_map(|(&s, &v)| art.epoch_at(s).filter(|e| (window.0..=window.1).contains(e)).map(|_| v))
        .collect();
    (!vals.is_empty()).then(|| stats::mean(&vals))
}

fn eta_key(eta: f64) -> i64 {
    (eta * 1e6).round() as i64
}

/// Runs the calibrated chart over `runs`. Members of the baseline are scored
/// against the baseline rebuilt without them.
pub fn phase2_detect(art: &Phase1Artifact, runs: &[RunRecord], opts: &DetectOptions) -> Result<DetectionTable> {
    let (k, h) = (art.calibration.k, art.calibration.h);
    let window = opts.window.unwrap_or_else(|| default_window(art.total_epochs));
    let mut rows = Vec::with_capacity(runs.len());
    let mut noisy_means: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for run in runs {
        let traj = trajectory(run, art.layer)?;
        let member = art.members.iter().position(|m| m.run_id == traj.run_id);
        let baseline = match member {
            Some(i) => {
                let others: Vec<Trajectory> = art
                    .members
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, m)| m.clone())
                    .collect();
                build_baseline(&others, Some(art.baseline.sigma_floor))?
            }
            None => art.baseline.clone(),
        };
        let (det, _) = cusum::detect(&baseline, k, h, &traj)?;
        if member.is_none() && run.eta() > 0.0 {
            if let Some(m) = window_mean(art, &traj, window) {
                noisy_means.entry(eta_key(run.eta())).or_default().push(m);
            }
        }
        rows.push(DetectionRow {
            run_id: det.run_id,
            eta: run.eta(),
            alarmed: det.alarmed,
            detection_step: det.detection_step,
            detection_epoch: det.detection_step.and_then(|s| art.epoch_at(s)),
            max_statistic: det.max_statistic,
            snapshots: det.snapshots,
            loo_control: member.is_some(),
        });
    }

    let clean_means: Vec<f64> = art.members.iter().filter_map(|m| window_mean(art, m, window)).collect();
    let mut groups: BTreeMap<i64, Vec<&DetectionRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry(eta_key(r.eta)).or_default().push(r);
    }
    let theory = false_alarm_probability(art.horizon() as f64, art.calibration.arl0_target);
    let mut cells = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let eta = members[0].eta;
        let alerts = members.iter().filter(|r| r.alarmed).count();
        let epochs: Vec<f64> = members
            .iter()
            .filter_map(|r| r.detection_epoch.map(|e| e as f64))
            .collect();
        let effect = match noisy_means.get(&key) {
            Some(noisy) if noisy.len() >= 2 && clean_means.len() >= 2 => Some(
                cohens_d(&clean_means, noisy, opts.bootstrap, opts.seed ^ key as u64)?.labelled(
                    layer_index(art.layer, runs),
                    eta,
                    window,
                ),
            ),
            _ => None,
        };
        cells.push(DetectionCell {
            eta,
            runs: members.len(),
            alerts,
            alert_rate: alerts as f64 / members.len() as f64,
            alert_ci: stats::wilson_interval(alerts, members.len()),
            detection_epoch_mean: (!epochs.is_empty()).then(|| stats::mean(&epochs)),
            detection_epoch_std: (epochs.len() >= 2).then(|| stats::sample_std(&epochs)),
            h,
            false_alarm_theory: theory,
            effect,
        });
    }
    Ok(DetectionTable {
        layer: art.layer,
        k,
        h,
        arl0: art.calibration.arl0_target,
        horizon: art.horizon(),
        window,
        rows,
        cells,
    })
}

fn layer_index(layer: MonitorLayer, runs: &[RunRecord]) -> usize {
    match layer {
        MonitorLayer::Layer(l) => l,
        _ => runs.first().map_or(0, |r| r.summary.layer_names.len().saturating_sub(1)),
    }
}

impl DetectionTable {
    /// Alert counts over every run with `eta > 0`.
    pub fn power(&self) -> (usize, usize) {
        let noisy: Vec<_> = self.rows.iter().filter(|r| r.eta > 0.0).collect();
        (noisy.iter().filter(|r| r.alarmed).count(), noisy.len())
    }

    /// Alert counts over clean runs (leave-one-out members and fresh seeds).
    pub fn false_alarms(&self) -> (usize, usize) {
        let clean: Vec<_> = self.rows.iter().filter(|r| r.eta == 0.0).collect();
        (clean.iter().filter(|r| r.alarmed).count(), clean.len())
    }
}

impl fmt::Display for DetectionTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6} {:>6} {:>22} {:>11} {:>8} {:>9}",
            "eta", "runs", "det. epoch (mean±std)", "alert rate", "h", "d"
        )?;
        for c in &self.cells {
            let epoch = match (c.detection_epoch_mean, c.detection_epoch_std) {
                (Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
                (Some(m), None) => format!("{m:.1}"),
                _ => "-".into(),
            };
            let d = c
                .effect
                .as_ref()
                .and_then(|e| e.d.value())
                .map_or_else(|| "-".into(), |d| format!("{d:.2}"));
            writeln!(
                f,
                "{:>6.2} {:>6} {:>22} {:>11.2} {:>8.2} {:>9}",
                c.eta, c.runs, epoch, c.alert_rate, c.h, d
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: f64,
    pub arl0: f64,
    pub h: f64,
    pub arl0_achieved: f64,
    pub power: f64,
    pub power_ci: Interval,
    pub false_alarm_rate: f64,
    pub false_alarm_ci: Interval,
    pub false_alarm_theory: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub layer: MonitorLayer,
    pub cells: Vec<SweepCell>,
}

/// Recalibrates and re-detects for every `(k, ARL₀)` pair.
pub fn sensitivity_sweep(
    clean: &[RunRecord],
    runs: &[RunRecord],
    ks: &[f64],
    arl0s: &[f64],
    base: &Phase1Options,
) -> Result<SweepReport> {
    let mut cells = Vec::with_capacity(ks.len() * arl0s.len());
    for &k in ks {
        for &arl0 in arl0s {
            let opts = Phase1Options { k, arl0, ..base.clone() };
            let art = phase1_calibrate(clean, &opts)?;
            let table = phase2_detect(
                &art,
                runs,
                &DetectOptions {
                    bootstrap: 0,
                    ..DetectOptions::default()
                },
            )?;
            let (pa, pn) = table.power();
            let (fa, fn_) = table.false_alarms();
            cells.push(SweepCell {
                k,
                arl0,
                h: art.calibration.h,
                arl0_achieved: art.calibration.arl0_achieved,
                power: pa as f64 / pn.max(1) as f64,
                power_ci: stats::wilson_interval(pa, pn),
                false_alarm_rate: fa as f64 / fn_.max(1) as f64,
                false_alarm_ci: stats::wilson_interval(fa, fn_),
                false_alarm_theory: false_alarm_probability(art.horizon() as f64, arl0),
            });
        }
    }
    Ok(SweepReport {
        layer: base.layer,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monitor_layer_text() {
        for s in ["head", "sum", "2"] {
            assert_eq!(s.parse::<MonitorLayer>().unwrap().to_string(), s);
        }
        assert!("x".parse::<MonitorLayer>().is_err());
    }

    #[test]
    fn default_window_is_middle_third() {
        assert_eq!(default_window(30), (11, 20));
        assert_eq!(default_window(1), (1, 1));
    }
}
