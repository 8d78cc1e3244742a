//! Variance of the layer-trace estimator: fixed-Hessian variance, anisotropy,
//! the relative-error bound and the probe/batch noise balance `K*`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{BlockStats, DenseHessian};
use crate::stats::{self, Interval};

/// Rounding slack when `‖H‖_F² − Σ diag²` comes out marginally negative.
const CANCELLATION_SLACK: f64 = 1e-12;

/// `(2/K)(‖H_ℓ‖_F² − Σᵢ (H_ℓ)ᵢᵢ²)`, the variance of the Rademacher estimate.
pub fn variance_fixed_hessian(frobenius_sq: f64, diag_sq_sum: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::ZeroProbes);
    }
    if !(frobenius_sq >= 0.0) {
        return Err(Error::NegativeStatistic(format!("frobenius_sq = {frobenius_sq}")));
    }
    if !(diag_sq_sum >= 0.0) {
        return Err(Error::NegativeStatistic(format!("diag_sq_sum = {diag_sq_sum}")));
    }
    let off = frobenius_sq - diag_sq_sum;
    if off < -CANCELLATION_SLACK * frobenius_sq.max(1.0) {
        return Err(Error::NegativeStatistic(format!(
            "diag_sq_sum {diag_sq_sum} exceeds frobenius_sq {frobenius_sq}"
        )));
    }
    Ok(2.0 * off.max(0.0) / k as f64)
}

/// `κ_ℓ = ‖H_ℓ‖_F / |T_ℓ|`, or a marker when the trace vanishes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum Anisotropy {
    Finite(f64),
    /// `T_ℓ = 0`: the trace carries no scale information.
    SaddleDegenerate,
}

impl Anisotropy {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Finite(k) => Some(k),
            Self::SaddleDegenerate => None,
        }
    }
}

pub fn anisotropy(frobenius_sq: f64, trace: f64) -> Result<Anisotropy> {
    if !(frobenius_sq >= 0.0) {
        return Err(Error::NegativeStatistic(format!("frobenius_sq = {frobenius_sq}")));
    }
    if trace == 0.0 {
        return Ok(Anisotropy::SaddleDegenerate);
    }
    Ok(Anisotropy::Finite(frobenius_sq.sqrt() / trace.abs()))
}

/// `√(2/K) · κ_ℓ`, an upper bound on the relative standard error.
pub fn relative_error_bound(kappa: Anisotropy, k: usize) -> Option<f64> {
    if k == 0 {
        return None;
    }
    kappa.value().map(|kap| (2.0 / k as f64).sqrt() * kap)
}

/// Status of the critical probe count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum KStarValue {
    Available(f64),
    /// Debiased `V_B ≤ 0`: batch noise is below what the probes can resolve.
    BatchNoiseBelowResolution,
}

impl KStarValue {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Available(k) => Some(k),
            Self::BatchNoiseBelowResolution => None,
        }
    }
}

/// Both variance components and their ratio for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KStar {
    pub batches: usize,
    /// Mean probes per batch.
    pub probes: f64,
    /// Mean over batches of the single-probe sample variance.
    pub v_h1: f64,
    /// Across-batch variance of the per-batch mean, before debiasing.
    pub v_b_raw: f64,
    /// `v_b_raw − v_h1 · mean(1/K_b)`.
    pub v_b: f64,
    pub k_star: KStarValue,
}

fn k_star_point(batches: &[&[f64]]) -> (f64, f64, f64, f64) {
    let v_h1 = stats::mean(&batches.iter().map(|b| stats::sample_variance(b)).collect::<Vec<_>>());
    let means: Vec<f64> = batches.iter().map(|b| stats::mean(b)).collect();
    let v_b_raw = stats::sample_variance(&means);
    let inv_k = stats::mean(&batches.iter().map(|b| 1.0 / b.len() as f64).collect::<Vec<_>>());
    (v_h1, v_b_raw, v_b_raw - v_h1 * inv_k, inv_k)
}

/// `K* = V_H(1) / V_B` from per-probe quadratic forms grouped by batch.
pub fn k_star(batches: &[Vec<f64>]) -> Result<KStar> {
    if batches.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "K* needs at least 2 batches, got {}",
            batches.len()
        )));
    }
    if let Some(b) = batches.iter().find(|b| b.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "K* needs at least 2 probes per batch, got {}",
            b.len()
        )));
    }
    let refs: Vec<&[f64]> = batches.iter().map(Vec::as_slice).collect();
    let (v_h1, v_b_raw, v_b, inv_k) = k_star_point(&refs);
    let k_star = if v_b > 0.0 {
        KStarValue::Available(v_h1 / v_b)
    } else {
        KStarValue::BatchNoiseBelowResolution
    };
    Ok(KStar {
        batches: batches.len(),
        probes: 1.0 / inv_k,
        v_h1,
        v_b_raw,
        v_b,
        k_star,
    })
}

/// Percentile bootstrap interval for `K*`, resampling whole batches.
/// Replicates whose debiased `V_B` is not positive count as `+∞`.
pub fn k_star_bootstrap(batches: &[Vec<f64>], replicates: usize, seed: u64) -> Result<Interval> {
    k_star(batches)?;
    let n = batches.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reps = Vec::with_capacity(replicates);
    let mut pick: Vec<&[f64]> = Vec::with_capacity(n);
    for _ in 0..replicates {
        pick.clear();
        pick.extend((0..n).map(|_| batches[rng.random_range(0..n)].as_slice()));
        let (v_h1, _, v_b, _) = k_star_point(&pick);
        reps.push(if v_b > 0.0 { v_h1 / v_b } else { f64::INFINITY });
    }
    reps.sort_by(f64::total_cmp);
    Ok(Interval {
        lo: stats::quantile_sorted(&reps, 0.025),
        hi: stats::quantile_sorted(&reps, 0.975),
    })
}

/// Where a report entry's numbers came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Dense Hessian blocks.
    Oracle,
    /// Probe estimates; the fixed-Hessian variance drops `Σ diag²` and is an upper bound.
    Estimated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerVariance {
    pub layer: usize,
    pub name: String,
    pub params: usize,
    pub trace: f64,
    pub frobenius_sq: f64,
    pub var_fixed_h: f64,
    pub kappa: Anisotropy,
    pub rel_error_bound: Option<f64>,
    pub v_h1: Option<f64>,
    pub v_b: Option<f64>,
    pub k_star: Option<KStarValue>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub layers: Vec<LayerVariance>,
    /// How `V_H(1)` and `V_B` were estimated, when present.
    pub kstar_method: Option<String>,
}

const KSTAR_METHOD: &str = "V_H(1): mean over batches of the per-batch unbiased sample variance of \
single-probe quadratic forms; V_B: across-batch sample variance of per-batch mean traces minus V_H(1)/K";

impl VarianceReport {
    /// Exact per-layer numbers from a dense Hessian.
    pub fn from_oracle(hessian: &DenseHessian, k: usize) -> Result<Self> {
        let part = hessian.partition();
        let mut layers = Vec::with_capacity(part.layers());
        for (l, g) in part.groups().iter().enumerate() {
            let s: BlockStats = BlockStats::of(&hessian.block(l)?);
            let kappa = anisotropy(s.frobenius_sq, s.trace)?;
            layers.push(LayerVariance {
                layer: l,
                name: g.name.clone(),
                params: g.len,
                trace: s.trace,
                frobenius_sq: s.frobenius_sq,
                var_fixed_h: variance_fixed_hessian(s.frobenius_sq, s.diag_sq_sum, k)?,
                kappa,
                rel_error_bound: relative_error_bound(kappa, k),
                v_h1: None,
                v_b: None,
                k_star: None,
                provenance: Provenance::Oracle,
            });
        }
        Ok(Self {
            k,
            layers,
            kstar_method: None,
        })
    }

    /// Report from probe estimates of `T_ℓ` and `‖H_ℓ‖_F²`.
    pub fn from_estimates(
        names: &[String],
        sizes: &[usize],
        traces: &[f64],
        frobenius_sq: &[f64],
        k: usize,
    ) -> Result<Self> {
        let n = names.len();
        for len in [sizes.len(), traces.len(), frobenius_sq.len()] {
            if len != n {
                return Err(Error::LengthMismatch { expected: n, got: len });
            }
        }
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let fro = frobenius_sq[l].max(0.0);
            let kappa = anisotropy(fro, traces[l])?;
            layers.push(LayerVariance {
                layer: l,
                name: names[l].clone(),
                params: sizes[l],
                trace: traces[l],
                frobenius_sq: fro,
                var_fixed_h: variance_fixed_hessian(fro, 0.0, k)?,
                kappa,
                rel_error_bound: relative_error_bound(kappa, k),
                v_h1: None,
                v_b: None,
                k_star: None,
                provenance: Provenance::Estimated,
            });
        }
        Ok(Self {
            k,
            layers,
            kstar_method: None,
        })
    }

    /// Attaches `K*` components, one entry per layer.
    pub fn with_k_star(mut self, per_layer: &[KStar]) -> Result<Self> {
        if per_layer.len() != self.layers.len() {
            return Err(Error::LengthMismatch {
                expected: self.layers.len(),
                got: per_layer.len(),
            });
        }
        for (entry, ks) in self.layers.iter_mut().zip(per_layer) {
            entry.v_h1 = Some(ks.v_h1);
            entry.v_b = Some(ks.v_b);
            entry.k_star = Some(ks.k_star);
        }
        self.kstar_method = Some(KSTAR_METHOD.to_string());
        Ok(self)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4e}"))
}

impl fmt::Display for VarianceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10}",
            "layer", "P", "trace", "var(K)", "kappa", "bound", "V_H(1)", "V_B", "K*", "source"
        )?;
        for e in &self.layers {
            let kappa = match e.kappa {
                Anisotropy::Finite(k) => format!("{k:.4e}"),
                Anisotropy::SaddleDegenerate => "saddle".into(),
            };
            let ks = match e.k_star {
                Some(KStarValue::Available(k)) => format!("{k:.4e}"),
                Some(KStarValue::BatchNoiseBelowResolution) => "n/a".into(),
                None => "-".into(),
            };
            let src = match e.provenance {
                Provenance::Oracle => "oracle",
                Provenance::Estimated => "estimated",
            };
            writeln!(
                f,
                "{:<10} {:>6} {:>12.4e} {:>12.4e} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10}",
                e.name,
                e.params,
                e.trace,
                e.var_fixed_h,
                kappa,
                opt(e.rel_error_bound),
                opt(e.v_h1),
                opt(e.v_b),
                ks,
                src
            )?;
        }
        Ok(())
    }
}
