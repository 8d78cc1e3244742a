use serde::{Deserialize, Serialize};

use super::baseline::{Baseline, Trajectory};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CusumEntry {
    pub step: u64,
    pub z: f64,
    pub s_plus: f64,
    pub s_minus: f64,
}

/// Two-sided CUSUM
/// `S⁺_t = max(0, S⁺_{t−1} + z_t − k)`, `S⁻_t = max(0, S⁻_{t−1} − z_t − k)`,
/// alarming once `max(S⁺, S⁻) > h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CusumState {
    pub k: f64,
    pub h: f64,
    pub s_plus: f64,
    pub s_minus: f64,
    pub history: Vec<CusumEntry>,
    /// First step at which the threshold was crossed; later crossings do not move it.
    pub first_alarm: Option<u64>,
}

impl CusumState {
    pub fn new(k: f64, h: f64) -> Self {
        Self {
            k,
            h,
            s_plus: 0.0,
            s_minus: 0.0,
            history: Vec::new(),
            first_alarm: None,
        }
    }

    pub fn statistic(&self) -> f64 {
        self.s_plus.max(self.s_minus)
    }

    pub fn alarmed(&self) -> bool {
        self.first_alarm.is_some()
    }

    pub fn step(&mut self, step: u64, z: f64) -> Result<()> {
        if !z.is_finite() {
            return Err(Error::NonFiniteScore { step });
        }
        self.s_plus = (self.s_plus + z - self.k).max(0.0);
        self.s_minus = (self.s_minus - z - self.k).max(0.0);
        self.history.push(CusumEntry {
            step,
            z,
            s_plus: self.s_plus,
            s_minus: self.s_minus,
        });
        if self.first_alarm.is_none() && self.statistic() > self.h {
            self.first_alarm = Some(step);
        }
        Ok(())
    }

    /// Rebuilds a state from the recorded `(step, z)` pairs of `history`.
    pub fn replay(k: f64, h: f64, history: &[CusumEntry]) -> Result<Self> {
        let mut s = Self::new(k, h);
        for e in history {
            s.step(e.step, e.z)?;
        }
        Ok(s)
    }

    pub fn max_statistic(&self) -> f64 {
        self.history
            .iter()
            .map(|e| e.s_plus.max(e.s_minus))
            .fold(0.0, f64::max)
    }
}

/// Outcome of running the chart on one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub run_id: String,
    pub alarmed: bool,
    pub detection_step: Option<u64>,
    pub max_statistic: f64,
    pub snapshots: usize,
}

/// Standardizes `traj` against `baseline` and runs the chart over it.
pub fn detect(baseline: &Baseline, k: f64, h: f64, traj: &Trajectory) -> Result<(Detection, CusumState)> {
    let z = baseline.standardize(traj)?;
    let mut state = CusumState::new(k, h);
    for (&step, &zt) in traj.steps.iter().zip(&z) {
        state.step(step, zt)?;
    }
    Ok((
        Detection {
            run_id: traj.run_id.clone(),
            alarmed: state.alarmed(),
            detection_step: state.first_alarm,
            max_statistic: state.max_statistic(),
            snapshots: z.len(),
        },
        state,
    ))
}
