//! A recorded scalar loss together with its parameter leaves, exposing the
//! gradient and reverse-over-reverse Hessian-vector products.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::partition::ParamPartition;

/// A parameter tensor on the tape and where it lives in the flat vector.
#[derive(Clone, Debug)]
pub struct ParamLeaf {
    pub var: Var,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamLeaf {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that can apply the loss Hessian to a vector.
pub trait CurvatureOperator {
    fn partition(&self) -> &ParamPartition;

    fn hvp(&mut self, v: &[f64]) -> Result<Vec<f64>>;

    fn dim(&self) -> usize {
        self.partition().total()
    }
}

/// Builds a differentiated graph at arbitrary parameter values.
pub trait Objective: Sync {
    type Graph: CurvatureOperator + Clone + Send + Sync;

    fn partition(&self) -> &ParamPartition;

    /// Forward pass plus gradient with the graph retained.
    fn graph(&self, params: &[f64]) -> Result<Self::Graph>;

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>>;
}

/// A loss recorded on a [`Tape`].
#[derive(Clone, Debug)]
pub struct LossGraph {
    tape: Tape,
    loss: Var,
    leaves: Vec<ParamLeaf>,
    partition: ParamPartition,
    grads: Option<Vec<Option<Var>>>,
    gradient: Option<Vec<f64>>,
}

impl LossGraph {
    pub fn new(
        tape: Tape,
        loss: Var,
        leaves: Vec<ParamLeaf>,
        partition: ParamPartition,
    ) -> Result<Self> {
        if tape.value(loss).shape() != (1, 1) {
            return Err(Error::Shape {
                node: loss.index(),
                op: tape.op_name(loss),
                detail: "loss must be a scalar".into(),
            });
        }
        let covered: usize = leaves.iter().map(ParamLeaf::len).sum();
        if covered != partition.total() {
            return Err(Error::LengthMismatch {
                expected: partition.total(),
                got: covered,
            });
        }
        Ok(Self {
            tape,
            loss,
            leaves,
            partition,
            grads: None,
            gradient: None,
        })
    }

    pub fn loss(&self) -> f64 {
        self.tape.value(self.loss).item()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn leaves(&self) -> &[ParamLeaf] {
        &self.leaves
    }

    pub fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    pub fn is_retained(&self) -> bool {
        self.grads.is_some()
    }

    fn gather(&self, adjoints: &[Option<Var>]) -> Vec<f64> {
        let mut out = vec![0.0; self.partition.total()];
        for (leaf, adj) in self.leaves.iter().zip(adjoints) {
            if let Some(a) = adj {
                out[leaf.offset..leaf.offset + leaf.len()]
                    .copy_from_slice(self.tape.value(*a).data());
            }
        }
        out
    }

    /// `∇θ L`. Parameters used at several sites accumulate every contribution.
    /// With `retain` the gradient nodes stay on the tape for [`Self::hvp`].
    pub fn gradient(&mut self, retain: bool) -> Result<Vec<f64>> {
        if let Some(g) = &self.gradient {
            if retain && !self.is_retained() {
                return Err(Error::NotRetained);
            }
            return Ok(g.clone());
        }
        let base = self.tape.len();
        let one = self.tape.constant(Tensor::scalar(1.0));
        let wrt: Vec<Var> = self.leaves.iter().map(|l| l.var).collect();
        let adj = self.tape.vjp(&[(self.loss, one)], &wrt)?;
        let g = self.gather(&adj);
        if let Some(node) = g
            .iter()
            .any(|x| !x.is_finite())
            .then(|| self.tape.first_non_finite())
            .flatten()
        {
            self.tape.truncate(base);
            return Err(Error::NonFiniteNode { node });
        }
        if retain {
            self.grads = Some(adj);
        } else {
            self.tape.truncate(base);
        }
        self.gradient = Some(g.clone());
        Ok(g)
    }

    /// `H v` by differentiating `⟨∇θ L, v⟩` through the retained gradient graph.
    pub fn hvp(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.partition.total() {
            return Err(Error::LengthMismatch {
                expected: self.partition.total(),
                got: v.len(),
            });
        }
        let grads = match &self.grads {
            Some(g) => g.clone(),
            None if self.gradient.is_some() => return Err(Error::NotRetained),
            None => return Err(Error::NoGradient),
        };
        let base = self.tape.len();
        let mut seeds = Vec::with_capacity(self.leaves.len());
        for (leaf, g) in self.leaves.iter().zip(&grads) {
            let Some(g) = *g else { continue };
            if !self.tape.requires_grad(g) {
                continue;
            }
            let slice = v[leaf.offset..leaf.offset + leaf.len()].to_vec();
            let seed = self
                .tape
                .constant(Tensor::from_vec(leaf.rows, leaf.cols, slice).expect("leaf shape"));
            seeds.push((g, seed));
        }
        let wrt: Vec<Var> = self.leaves.iter().map(|l| l.var).collect();
        let result = self.tape.vjp(&seeds, &wrt).map(|adj| self.gather(&adj));
        let out = match result {
            Ok(hv) if hv.iter().all(|x| x.is_finite()) => Ok(hv),
            Ok(_) => Err(Error::NonFiniteNode {
                node: self.tape.first_non_finite().unwrap_or(base),
            }),
            Err(e) => Err(e),
        };
        self.tape.truncate(base);
        out
    }
}

impl CurvatureOperator for LossGraph {
    fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    fn hvp(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        LossGraph::hvp(self, v)
    }
}

/// `½ θᵀAθ + bᵀθ` recorded on a tape. Useful whenever the exact Hessian must be known.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    matrix: Vec<f64>,
    linear: Vec<f64>,
    partition: ParamPartition,
}

impl QuadraticObjective {
    /// `matrix` is row-major P×P.
    pub fn new(matrix: Vec<f64>, linear: Vec<f64>, partition: ParamPartition) -> Result<Self> {
        let p = partition.total();
        if matrix.len() != p * p {
            return Err(Error::LengthMismatch {
                expected: p * p,
                got: matrix.len(),
            });
        }
        if linear.len() != p {
            return Err(Error::LengthMismatch {
                expected: p,
                got: linear.len(),
            });
        }
        Ok(Self {
            matrix,
            linear,
            partition,
        })
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Records the loss at `params` without differentiating.
    pub fn forward(&self, params: &[f64]) -> Result<LossGraph> {
        let p = self.partition.total();
        if params.len() != p {
            return Err(Error::LengthMismatch {
                expected: p,
                got: params.len(),
            });
        }
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::column(params.to_vec()));
        let a = tape.constant(Tensor::from_vec(p, p, self.matrix.clone()).expect("square"));
        let b = tape.constant(Tensor::column(self.linear.clone()));
        let a_theta = tape.matmul(a, theta)?;
        let quad = tape.mul(theta, a_theta)?;
        let quad = tape.sum(quad);
        let half = tape.scale(quad, 0.5);
        let lin = tape.mul(b, theta)?;
        let lin = tape.sum(lin);
        let loss = tape.add(half, lin)?;
        let leaf = ParamLeaf {
            var: theta,
            offset: 0,
            rows: p,
            cols: 1,
        };
        LossGraph::new(tape, loss, vec![leaf], self.partition.clone())
    }
}

impl Objective for QuadraticObjective {
    type Graph = LossGraph;

    fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    fn graph(&self, params: &[f64]) -> Result<LossGraph> {
        let mut g = self.forward(params)?;
        g.gradient(true)?;
        Ok(g)
    }

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        self.forward(params)?.gradient(false)
    }
}
