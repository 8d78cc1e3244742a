use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::spec::{Activation, LossKind, ModelSpec, SharingMode};
use crate::autodiff::{CurvatureOperator, LossGraph, Objective, ParamLeaf, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::partition::ParamPartition;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Arc<[usize]>),
    Values(Tensor),
}

/// A mini-batch: `n × d` inputs and their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Tensor,
    targets: Targets,
}

/// JSON shape of a batch file: `inputs` plus exactly one of `classes` / `values`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchFile {
    pub inputs: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Vec<f64>>>,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::InvalidArgument("batch is empty".into()));
        }
        let tn = match &targets {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        };
        if tn != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: tn,
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn classification(inputs: &[Vec<f64>], classes: &[usize]) -> Result<Self> {
        let x = Tensor::from_rows(inputs)
            .ok_or_else(|| Error::InvalidArgument("ragged input rows".into()))?;
        Self::new(x, Targets::Classes(Arc::from(classes)))
    }

    pub fn regression(inputs: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Self> {
        let x = Tensor::from_rows(inputs)
            .ok_or_else(|| Error::InvalidArgument("ragged input rows".into()))?;
        let y = Tensor::from_rows(values)
            .ok_or_else(|| Error::InvalidArgument("ragged target rows".into()))?;
        Self::new(x, Targets::Values(y))
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Rows `idx` of this batch, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.inputs.row(i).to_vec()).collect();
        match &self.targets {
            Targets::Classes(c) => {
                let cls: Vec<usize> = idx.iter().map(|&i| c[i]).collect();
                Self::classification(&rows, &cls)
            }
            Targets::Values(v) => {
                let vals: Vec<Vec<f64>> = idx.iter().map(|&i| v.row(i).to_vec()).collect();
                Self::regression(&rows, &vals)
            }
        }
    }

    pub fn to_file(&self) -> BatchFile {
        let inputs = (0..self.len()).map(|r| self.inputs.row(r).to_vec()).collect();
        match &self.targets {
            Targets::Classes(c) => BatchFile {
                inputs,
                classes: Some(c.to_vec()),
                values: None,
            },
            Targets::Values(v) => BatchFile {
                inputs,
                classes: None,
                values: Some((0..v.rows()).map(|r| v.row(r).to_vec()).collect()),
            },
        }
    }

    pub fn from_file(file: &BatchFile) -> Result<Self> {
        match (&file.classes, &file.values) {
            (Some(c), None) => Self::classification(&file.inputs, c),
            (None, Some(v)) => Self::regression(&file.inputs, v),
            _ => Err(Error::InvalidArgument(
                "batch file needs exactly one of `classes` or `values`".into(),
            )),
        }
    }
}

/// Which coordinate system a recorded graph is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Coordinates {
    Shared,
    Expanded,
}

fn apply_activation(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Tanh => tape.tanh(x),
        Activation::Softplus => tape.softplus(x),
        Activation::Relu => tape.relu(x),
    }
}

struct Recorded {
    tape: Tape,
    output: Var,
    leaves: Vec<ParamLeaf>,
    /// `(weight, bias)` leaves per layer per copy.
    layer_vars: Vec<Vec<(Var, Option<Var>)>>,
}

impl ModelSpec {
    fn record(&self, params: &[f64], inputs: &Tensor, coords: Coordinates) -> Result<Recorded> {
        self.validate()?;
        let partition = match coords {
            Coordinates::Shared => self.partition(),
            Coordinates::Expanded => self.expanded_partition(),
        };
        if params.len() != partition.total() {
            return Err(Error::LengthMismatch {
                expected: partition.total(),
                got: params.len(),
            });
        }
        if inputs.cols() != self.input {
            return Err(Error::Shape {
                node: 0,
                op: "input",
                detail: format!("batch has {} features, model expects {}", inputs.cols(), self.input),
            });
        }
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        let mut layer_vars = Vec::new();
        let mut cursor = 0;
        for shape in self.shapes() {
            let copies = match coords {
                Coordinates::Expanded if shape.reuse > 1 => shape.reuse,
                _ => 1,
            };
            let mut vars = Vec::with_capacity(copies);
            for _ in 0..copies {
                let w_len = shape.weight_len();
                let w_val = Tensor::from_vec(
                    shape.fan_in,
                    shape.fan_out,
                    params[cursor..cursor + w_len].to_vec(),
                )
                .expect("weight shape");
                let w = tape.param(w_val);
                leaves.push(ParamLeaf {
                    var: w,
                    offset: cursor,
                    rows: shape.fan_in,
                    cols: shape.fan_out,
                });
                cursor += w_len;
                let b = if shape.bias {
                    let b_val = Tensor::from_vec(
                        1,
                        shape.fan_out,
                        params[cursor..cursor + shape.fan_out].to_vec(),
                    )
                    .expect("bias shape");
                    let b = tape.param(b_val);
                    leaves.push(ParamLeaf {
                        var: b,
                        offset: cursor,
                        rows: 1,
                        cols: shape.fan_out,
                    });
                    cursor += shape.fan_out;
                    Some(b)
                } else {
                    None
                };
                vars.push((w, b));
            }
            layer_vars.push(vars);
        }

        let n = inputs.rows();
        let mut h = tape.constant(inputs.clone());
        for (layer, vars) in self.layers.iter().zip(&layer_vars) {
            for k in 0..layer.reuse() {
                let (w, b) = vars[k.min(vars.len() - 1)];
                let mut pre = tape.matmul(h, w)?;
                if let Some(b) = b {
                    let bb = tape.repeat_rows(b, n)?;
                    pre = tape.add(pre, bb)?;
                }
                h = apply_activation(&mut tape, pre, layer.activation());
            }
        }
        Ok(Recorded {
            tape,
            output: h,
            leaves,
            layer_vars,
        })
    }

    fn record_loss(&self, params: &[f64], batch: &Batch, coords: Coordinates) -> Result<LossGraph> {
        let Recorded {
            mut tape,
            output,
            leaves,
            layer_vars,
        } = self.record(params, batch.inputs(), coords)?;
        let n = batch.len();
        let mut loss = match (self.loss, batch.targets()) {
            (LossKind::CrossEntropy, Targets::Classes(c)) => {
                tape.softmax_cross_entropy(output, c.clone())?
            }
            (LossKind::Mse, Targets::Values(y)) => {
                let y = tape.constant(y.clone());
                let d = tape.sub(output, y)?;
                let sq = tape.mul(d, d)?;
                let s = tape.sum(sq);
                tape.scale(s, 1.0 / n as f64)
            }
            (kind, _) => {
                return Err(Error::InvalidArgument(format!(
                    "{kind:?} loss does not match the batch target type"
                )))
            }
        };
        if self.weight_decay > 0.0 {
            // λ‖θ‖²; in unrolled coordinates only the first copy carries it
            for vars in &layer_vars {
                let (w, b) = vars[0];
                for leaf in std::iter::once(w).chain(b) {
                    let sq = tape.mul(leaf, leaf)?;
                    let s = tape.sum(sq);
                    let term = tape.scale(s, self.weight_decay);
                    loss = tape.add(loss, term)?;
                }
            }
        }
        let partition = match coords {
            Coordinates::Shared => self.partition(),
            Coordinates::Expanded => self.expanded_partition(),
        };
        LossGraph::new(tape, loss, leaves, partition)
    }

    /// Network outputs for `inputs` (logits for classification).
    pub fn predict(&self, params: &[f64], inputs: &Tensor) -> Result<Tensor> {
        let rec = self.record(params, inputs, Coordinates::Shared)?;
        Ok(rec.tape.value(rec.output).clone())
    }

    /// Records `L_B(θ)` on a fresh tape. Differentiate with
    /// [`ModelGraph::gradient`] and [`ModelGraph::hvp`].
    pub fn forward(&self, params: &[f64], batch: &Batch) -> Result<ModelGraph> {
        let partition = self.partition();
        if params.len() != partition.total() {
            return Err(Error::LengthMismatch {
                expected: partition.total(),
                got: params.len(),
            });
        }
        match self.sharing {
            SharingMode::Shared => Ok(ModelGraph {
                inner: self.record_loss(params, batch, Coordinates::Shared)?,
                unrolling: None,
                partition,
            }),
            SharingMode::Unrolled => {
                let expanded = self.expand(params)?;
                Ok(ModelGraph {
                    inner: self.record_loss(&expanded, batch, Coordinates::Expanded)?,
                    unrolling: Some(Arc::new(Unrolling::new(self))),
                    partition,
                })
            }
        }
    }

    /// Records the loss in unrolled coordinates (one group per virtual copy).
    pub fn forward_expanded(&self, expanded: &[f64], batch: &Batch) -> Result<LossGraph> {
        self.record_loss(expanded, batch, Coordinates::Expanded)
    }
}

/// Where each shared group lives in unrolled coordinates.
#[derive(Clone, Debug)]
struct Segment {
    shared_offset: usize,
    len: usize,
    copies: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Unrolling {
    segments: Vec<Segment>,
    expanded_dim: usize,
}

impl Unrolling {
    fn new(spec: &ModelSpec) -> Self {
        let mut segments = Vec::new();
        let mut cursor = 0;
        for (g, shape) in spec.partition().groups().iter().zip(spec.shapes()) {
            let copies = if shape.reuse > 1 { shape.reuse } else { 1 };
            let offsets = (0..copies).map(|k| cursor + k * g.len).collect();
            cursor += copies * g.len;
            segments.push(Segment {
                shared_offset: g.offset,
                len: g.len,
                copies: offsets,
            });
        }
        Self {
            segments,
            expanded_dim: cursor,
        }
    }
}

/// Loss graph at fixed parameters, differentiated in shared coordinates.
///
/// In [`SharingMode::Unrolled`] the Hessian-vector product keeps every term
/// except the cross-instance blocks `∂²L̃/∂W⁽ᵏ⁾∂W⁽ᵏ'⁾`, `k ≠ k'`, of each tied
/// layer; that costs `1 + Σ M` products on the unrolled tape.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    inner: LossGraph,
    unrolling: Option<Arc<Unrolling>>,
    partition: ParamPartition,
}

impl ModelGraph {
    pub fn loss(&self) -> f64 {
        self.inner.loss()
    }

    pub fn is_unrolled(&self) -> bool {
        self.unrolling.is_some()
    }

    pub fn gradient(&mut self, retain: bool) -> Result<Vec<f64>> {
        let g = self.inner.gradient(retain)?;
        match &self.unrolling {
            None => Ok(g),
            Some(u) => {
                let mut out = vec![0.0; self.partition.total()];
                for seg in &u.segments {
                    for &c in &seg.copies {
                        for i in 0..seg.len {
                            out[seg.shared_offset + i] += g[c + i];
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn hvp(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.partition.total() {
            return Err(Error::LengthMismatch {
                expected: self.partition.total(),
                got: v.len(),
            });
        }
        let Some(u) = self.unrolling.clone() else {
            return self.inner.hvp(v);
        };
        let mut out = vec![0.0; self.partition.total()];
        let add_from = |out: &mut [f64], r: &[f64], skip: Option<(usize, usize)>| {
            for (si, seg) in u.segments.iter().enumerate() {
                for (ci, &c) in seg.copies.iter().enumerate() {
                    if let Some((s, k)) = skip {
                        if s == si && k != ci {
                            continue;
                        }
                    }
                    for i in 0..seg.len {
                        out[seg.shared_offset + i] += r[c + i];
                    }
                }
            }
        };
        // untied directions
        let mut probe = vec![0.0; u.expanded_dim];
        let mut any_untied = false;
        for seg in u.segments.iter().filter(|s| s.copies.len() == 1) {
            let c = seg.copies[0];
            probe[c..c + seg.len].copy_from_slice(&v[seg.shared_offset..seg.shared_offset + seg.len]);
            any_untied = true;
        }
        if any_untied {
            let r = self.inner.hvp(&probe)?;
            add_from(&mut out, &r, None);
        }
        // each virtual copy on its own, keeping only its diagonal block within the layer
        for (si, seg) in u.segments.iter().enumerate() {
            if seg.copies.len() == 1 {
                continue;
            }
            for (k, &c) in seg.copies.iter().enumerate() {
                let mut probe = vec![0.0; u.expanded_dim];
                probe[c..c + seg.len]
                    .copy_from_slice(&v[seg.shared_offset..seg.shared_offset + seg.len]);
                let r = self.inner.hvp(&probe)?;
                add_from(&mut out, &r, Some((si, k)));
            }
        }
        Ok(out)
    }

    pub fn partition(&self) -> &ParamPartition {
        &self.partition
    }
}

impl CurvatureOperator for ModelGraph {
    fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    fn hvp(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        ModelGraph::hvp(self, v)
    }
}

/// A model bound to one batch, in shared coordinates.
#[derive(Clone, Debug)]
pub struct ModelObjective<'a> {
    spec: &'a ModelSpec,
    batch: &'a Batch,
    partition: ParamPartition,
}

impl<'a> ModelObjective<'a> {
    pub fn new(spec: &'a ModelSpec, batch: &'a Batch) -> Self {
        Self {
            spec,
            batch,
            partition: spec.partition(),
        }
    }

    pub fn loss(&self, params: &[f64]) -> Result<f64> {
        Ok(self.spec.forward(params, self.batch)?.loss())
    }
}

impl Objective for ModelObjective<'_> {
    type Graph = ModelGraph;

    fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    fn graph(&self, params: &[f64]) -> Result<ModelGraph> {
        let mut g = self.spec.forward(params, self.batch)?;
        g.gradient(true)?;
        Ok(g)
    }

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        self.spec.forward(params, self.batch)?.gradient(false)
    }
}

/// A model bound to one batch, in unrolled coordinates where every use site of
/// a tied layer is an independent group.
#[derive(Clone, Debug)]
pub struct ExpandedObjective<'a> {
    spec: &'a ModelSpec,
    batch: &'a Batch,
    partition: ParamPartition,
}

impl<'a> ExpandedObjective<'a> {
    pub fn new(spec: &'a ModelSpec, batch: &'a Batch) -> Self {
        Self {
            spec,
            batch,
            partition: spec.expanded_partition(),
        }
    }
}

impl Objective for ExpandedObjective<'_> {
    type Graph = LossGraph;

    fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    fn graph(&self, params: &[f64]) -> Result<LossGraph> {
        let mut g = self.spec.forward_expanded(params, self.batch)?;
        g.gradient(true)?;
        Ok(g)
    }

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        self.spec.forward_expanded(params, self.batch)?.gradient(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::LayerSpec;

    fn linear_model() -> ModelSpec {
        ModelSpec {
            input: 1,
            layers: vec![LayerSpec::Dense {
                width: 1,
                activation: Activation::Identity,
                bias: true,
            }],
            loss: LossKind::Mse,
            sharing: SharingMode::Shared,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn linear_model_losses() {
        let spec = linear_model();
        let batch = Batch::regression(&[vec![1.0]], &[vec![1.0]]).unwrap();
        assert_eq!(spec.forward(&[1.0, 0.0], &batch).unwrap().loss(), 0.0);
        assert_eq!(spec.forward(&[0.0, 0.0], &batch).unwrap().loss(), 1.0);
    }

    #[test]
    fn linear_regression_hessian_is_constant() {
        // 2·[x 1]ᵀ[x 1] with x = 2
        let spec = linear_model();
        let batch = Batch::regression(&[vec![2.0]], &[vec![0.0]]).unwrap();
        let mut g = spec.forward(&[0.3, -0.1], &batch).unwrap();
        g.gradient(true).unwrap();
        assert_eq!(g.hvp(&[1.0, 0.0]).unwrap(), vec![8.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let spec = ModelSpec::mlp_small(3, 2);
        let batch = Batch::classification(&[vec![1.0, 2.0]], &[0]).unwrap();
        let params = spec.init_params(0);
        assert!(matches!(
            spec.forward(&params, &batch),
            Err(Error::Shape { op: "input", .. })
        ));
        assert!(matches!(
            spec.forward(&params[1..], &batch),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn batch_file_round_trip() {
        let b = Batch::classification(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[1, 0]).unwrap();
        let back = Batch::from_file(&b.to_file()).unwrap();
        assert_eq!(back, b);
        assert_eq!(b.select(&[1]).unwrap().len(), 1);
    }

    #[test]
    fn unrolled_gradient_equals_shared_gradient() {
        let spec = ModelSpec::mlp_tied(3, 2);
        let batch =
            Batch::classification(&[vec![0.1, -0.4, 0.9], vec![1.0, 0.2, -0.3]], &[0, 1]).unwrap();
        let params = spec.init_params(3);
        let gs = spec.forward(&params, &batch).unwrap().gradient(false).unwrap();
        let unrolled = spec.clone().with_sharing(SharingMode::Unrolled);
        let gu = unrolled.forward(&params, &batch).unwrap().gradient(false).unwrap();
        for (a, b) in gs.iter().zip(&gu) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }
}
