use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{loo_residuals, Trajectory};
use crate::error::{Error, Result};

/// Initial bisection bracket for `h`.
pub const H_BRACKET: (f64, f64) = (0.5, 50.0);
pub const MAX_BISECTION_STEPS: usize = 40;
const MAX_WIDENINGS: usize = 20;
/// Simulated sequences are cut at this multiple of the target ARL₀.
pub const RUN_LENGTH_CAP_FACTOR: f64 = 20.0;

/// In-control score distribution used to simulate run lengths.
#[derive(Clone, Debug, PartialEq)]
pub enum ResidualSource {
    /// IID resampling with replacement from pooled residuals.
    Pooled(Vec<f64>),
    StandardNormal,
}

impl ResidualSource {
    /// Pools leave-one-out residuals of a clean ensemble.
    pub fn leave_one_out(runs: &[Trajectory], sigma_floor: Option<f64>) -> Result<Self> {
        let pooled: Vec<f64> = loo_residuals(runs, sigma_floor)?.into_iter().flatten().collect();
        if pooled.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidArgument("non-finite leave-one-out residual".into()));
        }
        Ok(Self::Pooled(pooled))
    }

    fn label(&self) -> &'static str {
        match self {
            Self::Pooled(_) => "loo-pooled-iid-resampling",
            Self::StandardNormal => "standard-normal",
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Self::Pooled(r) => r[rng.random_range(0..r.len())],
            Self::StandardNormal => rng.sample(StandardNormal),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Pooled(r) if r.is_empty() => Err(Error::InvalidArgument("no residuals to resample".into())),
            _ => Ok(()),
        }
    }
}

fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Steps until `max(S⁺, S⁻) > h`, or `None` when no alarm occurs within `cap`.
fn run_length(source: &ResidualSource, k: f64, h: f64, cap: u64, rng: &mut ChaCha8Rng) -> Option<u64> {
    let (mut sp, mut sm) = (0.0f64, 0.0f64);
    for t in 1..=cap {
        let z = source.draw(rng);
        sp = (sp + z - k).max(0.0);
        sm = (sm - z - k).max(0.0);
        if sp > h || sm > h {
            return Some(t);
        }
    }
    None
}

/// Simulated in-control run lengths, `None` if censored at `cap`. Sequence
/// `i` always uses the same draws, so every run length is non-decreasing in `h`.
pub fn run_lengths(
    source: &ResidualSource,
    k: f64,
    h: f64,
    sequences: usize,
    seed: u64,
    cap: u64,
) -> Result<Vec<Option<u64>>> {
    source.validate()?;
    Ok((0..sequences)
        .into_par_iter()
        .map(|i| run_length(source, k, h, cap, &mut sequence_rng(seed, i)))
        .collect())
}

/// Mean run length, counting censored sequences as `cap`.
pub fn average_run_length(
    source: &ResidualSource,
    k: f64,
    h: f64,
    sequences: usize,
    seed: u64,
    cap: u64,
) -> Result<f64> {
    let rl = run_lengths(source, k, h, sequences, seed, cap)?;
    Ok(rl.iter().map(|t| t.unwrap_or(cap)).sum::<u64>() as f64 / rl.len().max(1) as f64)
}

/// Number of simulated sequences alarming within `horizon` steps.
pub fn false_alarms_within(
    source: &ResidualSource,
    k: f64,
    h: f64,
    horizon: u64,
    sequences: usize,
    seed: u64,
) -> Result<usize> {
    if horizon == 0 {
        return Ok(0);
    }
    let rl = run_lengths(source, k, h, sequences, seed, horizon)?;
    Ok(rl.iter().filter(|t| t.is_some()).count())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub k: f64,
    pub arl0_target: f64,
    /// Accept `h` once `|ARL̂₀ − target| / target` is at most this.
    pub tolerance: f64,
    pub sequences: usize,
    pub seed: u64,
}

impl CalibrationConfig {
    pub fn new(k: f64, arl0_target: f64, seed: u64) -> Self {
        Self {
            k,
            arl0_target,
            tolerance: 0.05,
            sequences: 2000,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub k: f64,
    pub h: f64,
    pub arl0_target: f64,
    pub arl0_achieved: f64,
    pub tolerance: f64,
    pub sequences: usize,
    pub seed: u64,
    pub evaluations: usize,
    pub converged: bool,
    pub run_length_cap: u64,
    pub residuals: String,
    pub residual_count: Option<usize>,
}

/// Finds `h` whose simulated ARL₀ is within tolerance of the target by bisection.
pub fn calibrate_threshold(source: &ResidualSource, cfg: &CalibrationConfig) -> Result<Calibration> {
    if !(cfg.arl0_target > 0.0) || !(cfg.k >= 0.0) || !(cfg.tolerance > 0.0) || cfg.sequences == 0 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs target > 0, k ≥ 0, tolerance > 0, sequences ≥ 1 (got {cfg:?})"
        )));
    }
    source.validate()?;
    let target = cfg.arl0_target;
    let cap = (RUN_LENGTH_CAP_FACTOR * target).ceil().max(1.0) as u64;
    let mut evaluations = 0;
    let mut arl = |h: f64| {
        evaluations += 1;
        average_run_length(source, cfg.k, h, cfg.sequences, cfg.seed, cap)
    };
    let within = |a: f64| (a - target).abs() / target <= cfg.tolerance;

    let (mut lo, mut hi) = H_BRACKET;
    let mut a_lo = arl(lo)?;
    let mut widen = 0;
    while a_lo > target {
        widen += 1;
        if widen > MAX_WIDENINGS {
            return Err(Error::Bracket { lo, hi, target });
        }
        lo /= 2.0;
        a_lo = arl(lo)?;
    }
    let mut a_hi = arl(hi)?;
    widen = 0;
    while a_hi < target {
        widen += 1;
        if widen > MAX_WIDENINGS {
            return Err(Error::Bracket { lo, hi, target });
        }
        lo = hi;
        a_lo = a_hi;
        hi *= 2.0;
        a_hi = arl(hi)?;
    }

    let mut best = if (a_lo - target).abs() <= (a_hi - target).abs() {
        (lo, a_lo)
    } else {
        (hi, a_hi)
    };
    let mut converged = within(best.1);
    let mut iter = 0;
    while !converged && iter < MAX_BISECTION_STEPS {
        iter += 1;
        let mid = 0.5 * (lo + hi);
        let a = arl(mid)?;
        if (a - target).abs() < (best.1 - target).abs() {
            best = (mid, a);
        }
        if within(a) {
            converged = true;
        } else if a < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let residual_count = match source {
        ResidualSource::Pooled(r) => Some(r.len()),
        ResidualSource::StandardNormal => None,
    };
    Ok(Calibration {
        k: cfg.k,
        h: best.0,
        arl0_target: target,
        arl0_achieved: best.1,
        tolerance: cfg.tolerance,
        sequences: cfg.sequences,
        seed: cfg.seed,
        evaluations,
        converged,
        run_length_cap: cap,
        residuals: source.label().to_string(),
        residual_count,
    })
}

/// `1 − exp(−T / ARL₀)`.
pub fn false_alarm_probability(horizon: f64, arl0: f64) -> f64 {
    1.0 - (-horizon / arl0).exp()
}
