use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{self, Interval};

pub const BOOTSTRAP_REPLICATES: usize = 10_000;

/// A statistic that may be undefined for degenerate inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum Estimate {
    Defined(f64),
    Undefined,
}

impl Estimate {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Defined(v) => Some(v),
            Self::Undefined => None,
        }
    }
}

/// Standardized difference between clean and noisy window means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub layer: usize,
    pub eta: f64,
    /// Inclusive 1-based epoch range the window means were taken over.
    pub window: (usize, usize),
    pub n_clean: usize,
    pub n_noisy: usize,
    pub d: Estimate,
    /// 95% percentile bootstrap interval over resampled runs.
    pub ci: Option<Interval>,
}

impl EffectSize {
    pub fn labelled(mut self, layer: usize, eta: f64, window: (usize, usize)) -> Self {
        self.layer = layer;
        self.eta = eta;
        self.window = window;
        self
    }
}

fn d_point(clean: &[f64], noisy: &[f64]) -> Option<f64> {
    let pooled = (stats::sample_variance(clean) + stats::sample_variance(noisy)) / 2.0;
    let diff = stats::mean(clean) - stats::mean(noisy);
    if pooled > 0.0 {
        Some(diff / pooled.sqrt())
    } else if diff == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

/// `d = (μ₀ − μ_η) / √((s₀² + s_η²)/2)` with a bootstrap interval from
/// resampling runs within each arm.
///
/// Identical arms give `d = 0`; differing arms with zero spread are undefined.
pub fn cohens_d(clean: &[f64], noisy: &[f64], replicates: usize, seed: u64) -> Result<EffectSize> {
    for (arm, xs) in [("clean", clean), ("noisy", noisy)] {
        if xs.len() < 2 {
            return Err(Error::InsufficientRuns {
                needed: 2,
                got: xs.len(),
            });
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite {arm} sample")));
        }
    }
    let d = match d_point(clean, noisy) {
        Some(v) => Estimate::Defined(v),
        None => Estimate::Undefined,
    };
    let ci = match d {
        Estimate::Defined(v) if replicates > 0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = vec![0.0; clean.len()];
            let mut b = vec![0.0; noisy.len()];
            let mut reps = Vec::with_capacity(replicates);
            for _ in 0..replicates {
                a.iter_mut().for_each(|x| *x = clean[rng.random_range(0..clean.len())]);
                b.iter_mut().for_each(|x| *x = noisy[rng.random_range(0..noisy.len())]);
                if let Some(r) = d_point(&a, &b) {
                    reps.push(r);
                }
            }
            let mut ci = stats::percentile_interval(reps, 0.05);
            ci.lo = ci.lo.min(v);
            ci.hi = ci.hi.max(v);
            Some(ci)
        }
        _ => None,
    };
    Ok(EffectSize {
        layer: 0,
        eta: 0.0,
        window: (0, 0),
        n_clean: clean.len(),
        n_noisy: noisy.len(),
        d,
        ci,
    })
}

/// Pooled lag-1 autocorrelation of an ensemble of score sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autocorrelation {
    pub rho1: Estimate,
    pub ci: Option<Interval>,
    pub sequences: usize,
    pub pairs: usize,
}

fn rho1(seqs: &[&[f64]]) -> Option<f64> {
    let n: usize = seqs.iter().map(|s| s.len()).sum();
    if n == 0 {
        return None;
    }
    let m = seqs.iter().flat_map(|s| s.iter()).sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for s in seqs {
        for (i, x) in s.iter().enumerate() {
            den += (x - m) * (x - m);
            if let Some(y) = s.get(i + 1) {
                num += (x - m) * (y - m);
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// `ρ̂₁ = Σ (z_t − z̄)(z_{t+1} − z̄) / Σ (z_t − z̄)²` pooled over sequences, with
/// a bootstrap interval from resampling whole sequences.
pub fn autocorr_lag1(seqs: &[Vec<f64>], replicates: usize, seed: u64) -> Autocorrelation {
    let refs: Vec<&[f64]> = seqs.iter().map(Vec::as_slice).collect();
    let pairs = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
    let point = rho1(&refs);
    let ci = point.filter(|_| replicates > 0 && seqs.len() > 1).map(|_| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = Vec::with_capacity(refs.len());
        let mut reps = Vec::with_capacity(replicates);
        for _ in 0..replicates {
            pick.clear();
            pick.extend((0..refs.len()).map(|_| refs[rng.random_range(0..refs.len())]));
            if let Some(r) = rho1(&pick) {
                reps.push(r);
            }
        }
        stats::percentile_interval(reps, 0.05)
    });
    Autocorrelation {
        rho1: point.map_or(Estimate::Undefined, Estimate::Defined),
        ci,
        sequences: seqs.len(),
        pairs,
    }
}
