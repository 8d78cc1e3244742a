use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Relative part of the σ floor, scaled by `median |μ₀|`.
pub const SIGMA_FLOOR_REL: f64 = 1e-8;
/// Absolute lower limit of the σ floor.
pub const SIGMA_FLOOR_ABS: f64 = 1e-12;

/// One run's monitored statistic on its snapshot grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub run_id: String,
    pub steps: Vec<u64>,
    pub values: Vec<f64>,
}

impl Trajectory {
    pub fn new(run_id: impl Into<String>, steps: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        if steps.len() != values.len() {
            return Err(Error::LengthMismatch {
                expected: steps.len(),
                got: values.len(),
            });
        }
        Ok(Self {
            run_id: run_id.into(),
            steps,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Per-step in-control mean and spread from a clean ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub grid: Vec<u64>,
    pub mu0: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub ensemble_size: usize,
    pub run_ids: Vec<String>,
    pub sigma_floor: f64,
}

/// `ε_σ = max(1e-8 · median |μ₀|, 1e-12)`.
pub fn default_sigma_floor(mu0: &[f64]) -> f64 {
    let abs: Vec<f64> = mu0.iter().map(|m| m.abs()).collect();
    let med = stats::median(&abs);
    (SIGMA_FLOOR_REL * if med.is_finite() { med } else { 0.0 }).max(SIGMA_FLOOR_ABS)
}

/// Ensemble mean and unbiased standard deviation at every grid step.
///
/// `sigma_floor = None` uses [`default_sigma_floor`].
pub fn build_baseline(runs: &[Trajectory], sigma_floor: Option<f64>) -> Result<Baseline> {
    if runs.len() < 2 {
        return Err(Error::InsufficientRuns {
            needed: 2,
            got: runs.len(),
        });
    }
    let grid = runs[0].steps.clone();
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "grid of run {} is not strictly increasing",
            runs[0].run_id
        )));
    }
    let offenders: Vec<String> = runs
        .iter()
        .filter(|r| r.steps != grid)
        .map(|r| r.run_id.clone())
        .collect();
    if !offenders.is_empty() {
        return Err(Error::GridMismatch(offenders));
    }
    let mut mu0 = Vec::with_capacity(grid.len());
    let mut sd = Vec::with_capacity(grid.len());
    let mut column = vec![0.0; runs.len()];
    for t in 0..grid.len() {
        for (c, r) in column.iter_mut().zip(runs) {
            *c = r.values[t];
        }
        mu0.push(stats::mean(&column));
        sd.push(stats::sample_std(&column));
    }
    let floor = sigma_floor.unwrap_or_else(|| default_sigma_floor(&mu0));
    let sigma0 = sd.into_iter().map(|s| s.max(floor)).collect();
    Ok(Baseline {
        grid,
        mu0,
        sigma0,
        ensemble_size: runs.len(),
        run_ids: runs.iter().map(|r| r.run_id.clone()).collect(),
        sigma_floor: floor,
    })
}

impl Baseline {
    fn position(&self, offset: usize, step: u64) -> Result<usize> {
        match self.grid.get(offset) {
            Some(&g) if g == step => Ok(offset),
            _ => Err(Error::OffGrid { step }),
        }
    }

    /// `z_t = (x_t − μ₀(t)) / σ₀(t)`.
    ///
    /// The trajectory must follow the grid from its first step; it may stop
    /// early (a failed run) but may not skip or add steps.
    pub fn standardize(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        traj.steps
            .iter()
            .zip(&traj.values)
            .enumerate()
            .map(|(i, (&step, &x))| {
                let t = self.position(i, step)?;
                Ok((x - self.mu0[t]) / self.sigma0[t])
            })
            .collect()
    }

    /// Inverse of [`Self::standardize`].
    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mu0.iter().zip(&self.sigma0))
            .map(|(z, (m, s))| m + z * s)
            .collect()
    }
}

/// Leave-one-out residuals: each run standardized against the other runs.
pub fn loo_residuals(runs: &[Trajectory], sigma_floor: Option<f64>) -> Result<Vec<Vec<f64>>> {
    if runs.len() < 3 {
        return Err(Error::InsufficientRuns {
            needed: 3,
            got: runs.len(),
        });
    }
    (0..runs.len())
        .map(|i| {
            let others: Vec<Trajectory> = runs
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, r)| r.clone())
                .collect();
            build_baseline(&others, sigma_floor)?.standardize(&runs[i])
        })
        .collect()
}
