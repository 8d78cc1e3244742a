//! Hutchinson estimators of layer-wise Hessian traces.

mod probes;
mod snapshot;
mod trace;

pub use probes::{ProbeBatch, ProbeKind};
pub use snapshot::{read_jsonl, SnapshotContext, SnapshotRecord, TraceSnapshot};
pub use trace::{
    cross_term_samples, frobenius_norm_sq, hutchinson_trace_block, single_pass_traces,
    unrolling_bias_experiment, BlockEstimate, LayerTraces, UnrollingBias,
};

