//! Hutchinson estimators of layer-block traces and Frobenius norms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probes::ProbeBatch;
use crate::autodiff::{CurvatureOperator, Objective};
use crate::error::{Error, Result};
use crate::model::{Batch, ExpandedObjective, ModelSpec, SharingMode};
use crate::oracle::{self, AssemblyMethod};
use crate::stats;

/// Per-layer estimate together with the per-probe values it averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEstimate {
    pub layer: usize,
    pub estimate: f64,
    pub samples: Vec<f64>,
}

impl BlockEstimate {
    fn from_samples(layer: usize, samples: Vec<f64>) -> Self {
        Self {
            layer,
            estimate: stats::mean(&samples),
            samples,
        }
    }

    pub fn sample_variance(&self) -> f64 {
        stats::sample_variance(&self.samples)
    }

    pub fn std_error(&self) -> f64 {
        stats::std_error(&self.samples)
    }
}

/// Output of the single-pass scheme: every layer from the same probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTraces {
    pub estimates: Vec<f64>,
    /// `samples[ℓ][k] = ⟨z_ℓ⁽ᵏ⁾, (H z⁽ᵏ⁾)_ℓ⟩`.
    pub samples: Vec<Vec<f64>>,
}

/// Evaluates `f` for every probe index, each worker on its own clone of `op`.
/// Results are returned in probe order whatever the scheduling.
pub(crate) fn map_probes<C, T, F>(op: &C, count: usize, f: F) -> Result<Vec<T>>
where
    C: CurvatureOperator + Clone + Send + Sync,
    T: Send,
    F: Fn(&mut C, usize) -> Result<T> + Sync + Send,
{
    if count == 0 {
        return Err(Error::ZeroProbes);
    }
    if count < 8 {
        let mut local = op.clone();
        return (0..count).map(|k| f(&mut local, k)).collect();
    }
    (0..count)
        .into_par_iter()
        .with_min_len(4)
        .map_init(|| op.clone(), |local, k| f(local, k))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn checked(value: f64, probe: usize, layer: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteProbe { probe, layer })
    }
}

/// `T̂_ℓ = (1/K) Σ_k z_kᵀ H_ℓ z_k` with probes supported on layer `ℓ` only.
///
/// Each probe is zero-padded into the full parameter vector, so the block
/// product comes from the same Hessian-vector product as the single-pass scheme.
pub fn hutchinson_trace_block<C>(op: &C, layer: usize, probes: &ProbeBatch) -> Result<BlockEstimate>
where
    C: CurvatureOperator + Clone + Send + Sync,
{
    let partition = op.partition().clone();
    let range = partition.range(layer)?;
    let samples = map_probes(op, probes.count, |op, k| {
        let z = probes.block(k, layer, range.len());
        let w = op.hvp(&partition.embed(layer, &z)?)?;
        checked(dot(&z, &w[range.clone()]), k, layer)
    })?;
    Ok(BlockEstimate::from_samples(layer, samples))
}

/// Every layer trace from one Hessian-vector product per probe.
///
/// For each probe `z ∈ ℝᴾ`, `w = Hz` and `s_ℓ += ⟨z_ℓ, w_ℓ⟩`; the cross-layer
/// terms `z_ℓᵀ H_{ℓm} z_m` have zero mean, so each `s_ℓ / K` is unbiased.
pub fn single_pass_traces<C>(op: &C, probes: &ProbeBatch) -> Result<LayerTraces>
where
    C: CurvatureOperator + Clone + Send + Sync,
{
    let partition = op.partition().clone();
    let per_probe = map_probes(op, probes.count, |op, k| {
        let z = probes.full(k, &partition);
        let w = op.hvp(&z)?;
        partition
            .groups()
            .iter()
            .enumerate()
            .map(|(l, g)| checked(dot(&z[g.range()], &w[g.range()]), k, l))
            .collect::<Result<Vec<f64>>>()
    })?;
    let layers = partition.layers();
    let samples: Vec<Vec<f64>> = (0..layers)
        .map(|l| per_probe.iter().map(|q| q[l]).collect())
        .collect();
    let estimates = samples.iter().map(|s| stats::mean(s)).collect();
    Ok(LayerTraces { estimates, samples })
}

/// `(1/K) Σ_k ‖(H z_k)_ℓ‖²` with probes on layer `ℓ`; unbiased for `‖H_ℓ‖_F²`.
pub fn frobenius_norm_sq<C>(op: &C, layer: usize, probes: &ProbeBatch) -> Result<BlockEstimate>
where
    C: CurvatureOperator + Clone + Send + Sync,
{
    let partition = op.partition().clone();
    let range = partition.range(layer)?;
    let samples = map_probes(op, probes.count, |op, k| {
        let z = probes.block(k, layer, range.len());
        let w = op.hvp(&partition.embed(layer, &z)?)?;
        let wl = &w[range.clone()];
        checked(dot(wl, wl), k, layer)
    })?;
    Ok(BlockEstimate::from_samples(layer, samples))
}

/// Per-probe cross terms `⟨z_ℓ, H_{ℓm} z_m⟩` drawn from full probes.
pub fn cross_term_samples<C>(op: &C, layer: usize, other: usize, probes: &ProbeBatch) -> Result<Vec<f64>>
where
    C: CurvatureOperator + Clone + Send + Sync,
{
    if layer == other {
        return Err(Error::SameLayer(layer));
    }
    let partition = op.partition().clone();
    let rl = partition.range(layer)?;
    let rm = partition.range(other)?;
    map_probes(op, probes.count, |op, k| {
        let z = probes.full(k, &partition);
        let mut zm = vec![0.0; partition.total()];
        zm[rm.clone()].copy_from_slice(&z[rm.clone()]);
        let w = op.hvp(&zm)?;
        checked(dot(&z[rl.clone()], &w[rl.clone()]), k, layer)
    })
}

/// Shared versus unrolled trace of one tied layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnrollingBias {
    pub layer: usize,
    pub reuse: usize,
    pub probes: usize,
    pub shared_estimate: f64,
    pub unrolled_estimate: f64,
    /// Mean of the paired per-probe differences.
    pub gap_estimate: f64,
    pub gap_std_error: f64,
    pub oracle_shared_trace: f64,
    pub oracle_unrolled_trace: f64,
    /// `Σ_{k≠k'} tr(∂²L̃/∂W⁽ᵏ⁾∂W⁽ᵏ'⁾)` from the dense unrolled Hessian.
    pub oracle_gap: f64,
    /// `|gap_estimate − oracle_gap| ≤ 4 · gap_std_error` (or both exactly zero).
    pub agrees: bool,
}

/// Runs the shared and the unrolled estimator on every tied layer with the
/// same probes and compares their gap with the dense oracle.
pub fn unrolling_bias_experiment(
    spec: &ModelSpec,
    params: &[f64],
    batch: &Batch,
    probes: &ProbeBatch,
) -> Result<Vec<UnrollingBias>> {
    if !spec.has_tied() {
        return Err(Error::NoTiedWeights);
    }
    let shared_spec = spec.clone().with_sharing(SharingMode::Shared);
    let mut shared = shared_spec.forward(params, batch)?;
    shared.gradient(true)?;
    let unrolled = if spec.max_reuse() >= 2 {
        let mut g = spec
            .clone()
            .with_sharing(SharingMode::Unrolled)
            .forward(params, batch)?;
        g.gradient(true)?;
        Some(g)
    } else {
        None
    };

    let expanded_obj = ExpandedObjective::new(spec, batch);
    let dense = oracle::assemble(
        &expanded_obj,
        &spec.expand(params)?,
        AssemblyMethod::BasisHvp,
        oracle::DEFAULT_CAP,
    )?;
    let exp_part = expanded_obj.partition().clone();
    let names = spec.layer_names();

    let mut out = Vec::new();
    for (layer, shape) in spec.shapes().iter().enumerate() {
        if !matches!(spec.layers[layer], crate::model::LayerSpec::Tied { .. }) {
            continue;
        }
        let copies: Vec<usize> = if shape.reuse > 1 {
            (0..shape.reuse)
                .map(|k| {
                    exp_part
                        .index_of(&format!("{}#{k}", names[layer]))
                        .expect("expanded group")
                })
                .collect()
        } else {
            vec![exp_part.index_of(&names[layer]).expect("group")]
        };
        let mut oracle_unrolled = 0.0;
        let mut oracle_gap = 0.0;
        for &a in &copies {
            oracle_unrolled += dense.block(a)?.trace();
            for &b in &copies {
                if a != b {
                    oracle_gap += dense.cross_block(a, b)?.trace();
                }
            }
        }

        let s = hutchinson_trace_block(&shared, layer, probes)?;
        let u = match &unrolled {
            Some(g) => hutchinson_trace_block(g, layer, probes)?,
            None => s.clone(),
        };
        let diffs: Vec<f64> = s.samples.iter().zip(&u.samples).map(|(a, b)| a - b).collect();
        let gap_estimate = stats::mean(&diffs);
        let gap_std_error = if diffs.len() > 1 {
            stats::std_error(&diffs)
        } else {
            0.0
        };
        let agrees = if gap_std_error == 0.0 {
            gap_estimate == 0.0 && oracle_gap == 0.0
        } else {
            (gap_estimate - oracle_gap).abs() <= 4.0 * gap_std_error
        };
        out.push(UnrollingBias {
            layer,
            reuse: shape.reuse,
            probes: probes.count,
            shared_estimate: s.estimate,
            unrolled_estimate: u.estimate,
            gap_estimate,
            gap_std_error,
            oracle_shared_trace: oracle_unrolled + oracle_gap,
            oracle_unrolled_trace: oracle_unrolled,
            oracle_gap,
            agrees,
        });
    }
    Ok(out)
}
