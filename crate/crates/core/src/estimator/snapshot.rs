//! Per-step trace snapshots and their JSON-lines wire format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::probes::ProbeBatch;
use super::trace::{single_pass_traces, LayerTraces};
use crate::autodiff::CurvatureOperator;
use crate::error::{Error, Result};

/// Single-pass estimates for every layer at one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSnapshot {
    pub run_id: String,
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
    pub eta: f64,
    pub loss: f64,
    /// Index of the mini-batch within its epoch.
    pub batch_id: usize,
    pub layer_names: Vec<String>,
    pub traces: LayerTraces,
}

/// Where a snapshot was taken.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotContext<'a> {
    pub run_id: &'a str,
    pub step: u64,
    pub epoch: usize,
    pub batch_id: usize,
    pub eta: f64,
    pub loss: f64,
}

impl TraceSnapshot {
    /// Runs the single-pass estimator with probes keyed by `(seed, step)`.
    pub fn take<C>(op: &C, seed: u64, k: usize, ctx: SnapshotContext<'_>) -> Result<Self>
    where
        C: CurvatureOperator + Clone + Send + Sync,
    {
        let probes = ProbeBatch::rademacher(seed, k).with_stream(ctx.step);
        let traces = single_pass_traces(op, &probes)?;
        Ok(Self {
            run_id: ctx.run_id.to_string(),
            step: ctx.step,
            epoch: ctx.epoch,
            seed,
            eta: ctx.eta,
            loss: ctx.loss,
            batch_id: ctx.batch_id,
            layer_names: op.partition().groups().iter().map(|g| g.name.clone()).collect(),
            traces,
        })
    }

    pub fn probes(&self) -> usize {
        self.traces.samples.first().map_or(0, Vec::len)
    }

    pub fn layers(&self) -> usize {
        self.traces.estimates.len()
    }

    pub fn records(&self) -> Vec<SnapshotRecord> {
        (0..self.layers())
            .map(|l| SnapshotRecord {
                run_id: self.run_id.clone(),
                step: self.step,
                epoch: self.epoch,
                layer: l,
                layers: self.layers(),
                layer_name: self.layer_names.get(l).cloned(),
                batch_id: self.batch_id,
                trace_est: self.traces.estimates[l],
                probe_vals: self.traces.samples[l].clone(),
                k: self.probes(),
                seed: self.seed,
                eta: self.eta,
                loss: self.loss,
            })
            .collect()
    }

    /// Writes one line per layer.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in self.records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// One `(step, layer)` line of the snapshot stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub run_id: String,
    pub step: u64,
    pub epoch: usize,
    pub layer: usize,
    /// Number of layers in the snapshot; lets a reader spot a partial step.
    #[serde(default)]
    pub layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_name: Option<String>,
    #[serde(default)]
    pub batch_id: usize,
    pub trace_est: f64,
    pub probe_vals: Vec<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub eta: f64,
    pub loss: f64,
}

/// Reads a snapshot stream, regrouping consecutive lines of the same step.
///
/// A final line without its newline (an interrupted append) is dropped, and so
/// is a trailing step whose layers are incomplete. Malformed complete lines
/// are errors.
pub fn read_jsonl<R: BufRead>(input: R, context: &str) -> Result<Vec<TraceSnapshot>> {
    let mut text = String::new();
    let mut reader = input;
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::io(context, e))?;
    let complete = match text.rfind('\n') {
        Some(pos) => &text[..=pos],
        None => "",
    };
    let mut records = Vec::new();
    for (i, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SnapshotRecord = serde_json::from_str(line)
            .map_err(|e| Error::json(format!("{context}:{}", i + 1), e))?;
        records.push(rec);
    }
    Ok(group_records(records))
}

fn group_records(records: Vec<SnapshotRecord>) -> Vec<TraceSnapshot> {
    let mut out: Vec<TraceSnapshot> = Vec::new();
    let mut expected = 0;
    for rec in records {
        expected = expected.max(rec.layers);
        let starts_new = match out.last() {
            Some(s) => s.step != rec.step || s.run_id != rec.run_id || rec.layer != s.layers(),
            None => true,
        };
        if starts_new {
            if rec.layer != 0 {
                continue;
            }
            out.push(TraceSnapshot {
                run_id: rec.run_id.clone(),
                step: rec.step,
                epoch: rec.epoch,
                seed: rec.seed,
                eta: rec.eta,
                loss: rec.loss,
                batch_id: rec.batch_id,
                layer_names: Vec::new(),
                traces: LayerTraces {
                    estimates: Vec::new(),
                    samples: Vec::new(),
                },
            });
        }
        let snap = out.last_mut().expect("pushed");
        if let Some(name) = rec.layer_name {
            snap.layer_names.push(name);
        }
        snap.traces.estimates.push(rec.trace_est);
        snap.traces.samples.push(rec.probe_vals);
    }
    let full = out.first().map_or(0, TraceSnapshot::layers).max(expected);
    if out.last().is_some_and(|s| s.layers() < full) {
        out.pop();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::MatrixOperator;
    use crate::partition::ParamPartition;
    use nalgebra::DMatrix;

    fn snapshot(step: u64) -> TraceSnapshot {
        let op = MatrixOperator::new(
            DMatrix::from_fn(4, 4, |i, j| 1.0 / (1.0 + i as f64 + j as f64)),
            ParamPartition::from_sizes([("a", 1), ("b", 3)]),
        )
        .unwrap();
        TraceSnapshot::take(
            &op,
            5,
            3,
            SnapshotContext {
                run_id: "r0",
                step,
                epoch: 1,
                batch_id: 0,
                eta: 0.0,
                loss: 1.5,
            },
        )
        .unwrap()
    }

    #[test]
    fn jsonl_round_trip() {
        let snaps = [snapshot(0), snapshot(10)];
        let mut buf = Vec::new();
        for s in &snaps {
            s.write_jsonl(&mut buf).unwrap();
        }
        let back = read_jsonl(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, snaps);
        let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        for key in ["run_id", "step", "epoch", "layer", "trace_est", "probe_vals", "K", "seed", "eta", "loss"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn truncation_yields_a_prefix() {
        let snaps = [snapshot(0), snapshot(10)];
        let mut buf = Vec::new();
        for s in &snaps {
            s.write_jsonl(&mut buf).unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let boundaries: Vec<usize> = text.match_indices('\n').map(|(i, _)| i + 1).collect();
        for cut in 0..=text.len() {
            let back = read_jsonl(&text.as_bytes()[..cut], "mem").unwrap();
            let whole = back.len();
            assert_eq!(back, snaps[..whole]);
            if boundaries.contains(&cut) && cut == boundaries[1] {
                assert_eq!(whole, 1);
            }
        }
    }

    #[test]
    fn fresh_probes_per_step() {
        assert_ne!(snapshot(0).traces.samples, snapshot(1).traces.samples);
        assert_eq!(snapshot(7), snapshot(7));
    }
}
