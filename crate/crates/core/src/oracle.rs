//! Brute-force Hessian assembly for desk-scale models.
//!
//! Every stochastic estimate in this crate has an exact counterpart here: the
//! dense Hessian is assembled column by column, either from Hessian-vector
//! products against the unit basis or from central differences of the
//! gradient, and then sliced into layer blocks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CurvatureOperator, Objective};
use crate::error::{Error, Result};
use crate::partition::ParamPartition;

pub const DEFAULT_CAP: usize = 2000;
/// Largest block handed to the dense symmetric eigensolver.
pub const EIGEN_CAP: usize = 512;
/// Central-difference step used by [`AssemblyMethod::FiniteDifference`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssemblyMethod {
    BasisHvp,
    FiniteDifference,
}

#[derive(Clone, Debug)]
pub struct DenseHessian {
    matrix: DMatrix<f64>,
    source: AssemblyMethod,
    partition: ParamPartition,
    asymmetry: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub trace: f64,
    pub frobenius_sq: f64,
    pub diag_sq_sum: f64,
    /// Ascending; `None` when the block is larger than [`EIGEN_CAP`].
    pub eigenvalues: Option<Vec<f64>>,
}

impl BlockStats {
    pub fn of(block: &DMatrix<f64>) -> Self {
        let trace = block.trace();
        let frobenius_sq = block.iter().map(|x| x * x).sum();
        let diag_sq_sum = block.diagonal().iter().map(|x| x * x).sum();
        let eigenvalues = (block.nrows() <= EIGEN_CAP).then(|| {
            let mut ev: Vec<f64> = SymmetricEigen::new(block.clone())
                .eigenvalues
                .iter()
                .copied()
                .collect();
            ev.sort_by(f64::total_cmp);
            ev
        });
        Self {
            trace,
            frobenius_sq,
            diag_sq_sum,
            eigenvalues,
        }
    }
}

fn check_cap(dim: usize, cap: usize) -> Result<()> {
    if dim > cap {
        return Err(Error::CapExceeded { dim, cap });
    }
    Ok(())
}

/// Assembles the dense Hessian of `objective` at `params`, symmetrized as `(H + Hᵀ)/2`.
pub fn assemble<O: Objective>(
    objective: &O,
    params: &[f64],
    method: AssemblyMethod,
    cap: usize,
) -> Result<DenseHessian> {
    let partition = objective.partition().clone();
    let p = partition.total();
    check_cap(p, cap)?;
    if params.len() != p {
        return Err(Error::LengthMismatch {
            expected: p,
            got: params.len(),
        });
    }
    let columns: Vec<Vec<f64>> = match method {
        AssemblyMethod::BasisHvp => {
            let base = objective.graph(params)?;
            (0..p)
                .into_par_iter()
                .map_init(
                    || base.clone(),
                    |g, j| {
                        let mut e = vec![0.0; p];
                        e[j] = 1.0;
                        g.hvp(&e)
                    },
                )
                .collect::<Result<_>>()?
        }
        AssemblyMethod::FiniteDifference => (0..p)
            .into_par_iter()
            .map(|j| {
                let mut plus = params.to_vec();
                let mut minus = params.to_vec();
                plus[j] += FD_STEP;
                minus[j] -= FD_STEP;
                let gp = objective.gradient(&plus)?;
                let gm = objective.gradient(&minus)?;
                Ok(gp
                    .iter()
                    .zip(&gm)
                    .map(|(a, b)| (a - b) / (2.0 * FD_STEP))
                    .collect())
            })
            .collect::<Result<_>>()?,
    };
    let raw = DMatrix::from_fn(p, p, |i, j| columns[j][i]);
    Ok(DenseHessian::from_raw(raw, method, partition))
}

impl DenseHessian {
    /// Wraps an arbitrary square matrix, recording its asymmetry and symmetrizing it.
    pub fn from_raw(raw: DMatrix<f64>, source: AssemblyMethod, partition: ParamPartition) -> Self {
        let norm = raw.norm();
        let asymmetry = if norm > 0.0 {
            (&raw - raw.transpose()).norm() / norm
        } else {
            0.0
        };
        let matrix = (&raw + raw.transpose()) * 0.5;
        Self {
            matrix,
            source,
            partition,
            asymmetry,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn source(&self) -> AssemblyMethod {
        self.source
    }

    pub fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    /// `‖H − Hᵀ‖_F / ‖H‖_F` before symmetrization.
    pub fn asymmetry(&self) -> f64 {
        self.asymmetry
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn block(&self, layer: usize) -> Result<DMatrix<f64>> {
        let r = self.partition.range(layer)?;
        Ok(self
            .matrix
            .view((r.start, r.start), (r.len(), r.len()))
            .into_owned())
    }

    /// `H_{ℓm}` for `ℓ ≠ m`.
    pub fn cross_block(&self, layer: usize, other: usize) -> Result<DMatrix<f64>> {
        if layer == other {
            return Err(Error::SameLayer(layer));
        }
        let r = self.partition.range(layer)?;
        let c = self.partition.range(other)?;
        Ok(self
            .matrix
            .view((r.start, c.start), (r.len(), c.len()))
            .into_owned())
    }

    pub fn exact_block_stats(&self, layer: usize) -> Result<BlockStats> {
        Ok(BlockStats::of(&self.block(layer)?))
    }

    /// Row-major dump: `u64` dimension, `u64` group count, `u64` group offsets
    /// (count + 1 entries, last one equals the dimension), then `f64` entries.
    /// All little-endian.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let p = self.dim() as u64;
        let mut bytes = Vec::with_capacity(8 * (3 + self.partition.layers() + self.dim().pow(2)));
        bytes.extend_from_slice(&p.to_le_bytes());
        bytes.extend_from_slice(&(self.partition.layers() as u64).to_le_bytes());
        for g in self.partition.groups() {
            bytes.extend_from_slice(&(g.offset as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&p.to_le_bytes());
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                bytes.extend_from_slice(&self.matrix[(i, j)].to_le_bytes());
            }
        }
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a dump written by [`Self::write_binary`]: the matrix and the group offsets.
    pub fn read_binary(path: &Path) -> Result<(DMatrix<f64>, Vec<usize>)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let word = |i: usize| -> Result<[u8; 8]> {
            buf.get(8 * i..8 * i + 8)
                .map(|s| s.try_into().expect("8 bytes"))
                .ok_or_else(|| Error::InvalidArgument(format!("{}: truncated dump", path.display())))
        };
        let p = u64::from_le_bytes(word(0)?) as usize;
        let groups = u64::from_le_bytes(word(1)?) as usize;
        let offsets = (0..=groups)
            .map(|g| Ok(u64::from_le_bytes(word(2 + g)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let start = 3 + groups;
        let mut data = Vec::with_capacity(p * p);
        for k in 0..p * p {
            data.push(f64::from_le_bytes(word(start + k)?));
        }
        Ok((DMatrix::from_row_slice(p, p, &data), offsets))
    }
}

/// A fixed symmetric matrix acting as its own Hessian.
#[derive(Clone, Debug)]
pub struct MatrixOperator {
    matrix: DMatrix<f64>,
    partition: ParamPartition,
}

impl MatrixOperator {
    pub fn new(matrix: DMatrix<f64>, partition: ParamPartition) -> Result<Self> {
        if matrix.nrows() != partition.total() || matrix.ncols() != partition.total() {
            return Err(Error::LengthMismatch {
                expected: partition.total(),
                got: matrix.nrows(),
            });
        }
        Ok(Self { matrix, partition })
    }

    /// Single-group operator.
    pub fn whole(matrix: DMatrix<f64>) -> Self {
        let partition = ParamPartition::single("block", matrix.nrows());
        Self { matrix, partition }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl CurvatureOperator for MatrixOperator {
    fn partition(&self) -> &ParamPartition {
        &self.partition
    }

    fn hvp(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.partition.total() {
            return Err(Error::LengthMismatch {
                expected: self.partition.total(),
                got: v.len(),
            });
        }
        let x = nalgebra::DVector::from_column_slice(v);
        Ok((&self.matrix * x).iter().copied().collect())
    }
}

/// Dense Hessian from any operator by applying it to the unit basis.
pub fn assemble_operator<C: CurvatureOperator>(op: &mut C, cap: usize) -> Result<DenseHessian> {
    let p = op.dim();
    check_cap(p, cap)?;
    let mut raw = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        let col = op.hvp(&e)?;
        raw.set_column(j, &nalgebra::DVector::from_vec(col));
    }
    Ok(DenseHessian::from_raw(
        raw,
        AssemblyMethod::BasisHvp,
        op.partition().clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::QuadraticObjective;

    fn block_diag_quadratic() -> QuadraticObjective {
        #[rustfmt::skip]
        let a = vec![
            2.0, 1.0, 0.0,
            1.0, 3.0, 0.0,
            0.0, 0.0, 5.0,
        ];
        QuadraticObjective::new(a, vec![0.0; 3], ParamPartition::from_sizes([("a", 2), ("b", 1)]))
            .unwrap()
    }

    #[test]
    fn quadratic_is_recovered_by_both_methods() {
        let q = block_diag_quadratic();
        let theta = [0.5, -1.0, 2.0];
        let h1 = assemble(&q, &theta, AssemblyMethod::BasisHvp, DEFAULT_CAP).unwrap();
        let h2 = assemble(&q, &theta, AssemblyMethod::FiniteDifference, DEFAULT_CAP).unwrap();
        let a = DMatrix::from_row_slice(3, 3, q.matrix());
        assert_eq!(h1.matrix(), &a);
        assert!((h2.matrix() - &a).amax() < 1e-8);
        assert_eq!(h1.cross_block(0, 1).unwrap().amax(), 0.0);
        assert_eq!(h1.asymmetry(), 0.0);
    }

    #[test]
    fn linear_loss_has_zero_hessian() {
        let q = QuadraticObjective::new(vec![0.0; 4], vec![1.0, -2.0], ParamPartition::single("t", 2))
            .unwrap();
        let h = assemble(&q, &[1.0, 1.0], AssemblyMethod::BasisHvp, DEFAULT_CAP).unwrap();
        assert_eq!(h.matrix().amax(), 0.0);
    }

    #[test]
    fn identity_and_swap_stats() {
        let s = BlockStats::of(&DMatrix::identity(3, 3));
        assert_eq!((s.trace, s.frobenius_sq, s.diag_sq_sum), (3.0, 3.0, 3.0));
        let swap = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let s = BlockStats::of(&swap);
        assert_eq!((s.trace, s.frobenius_sq), (0.0, 2.0));
        let ev = s.eigenvalues.unwrap();
        assert!((ev[0] + 1.0).abs() < 1e-12 && (ev[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cap_and_layer_errors() {
        let q = block_diag_quadratic();
        assert!(matches!(
            assemble(&q, &[0.0; 3], AssemblyMethod::BasisHvp, 2),
            Err(Error::CapExceeded { dim: 3, cap: 2 })
        ));
        let h = assemble(&q, &[0.0; 3], AssemblyMethod::BasisHvp, DEFAULT_CAP).unwrap();
        assert!(matches!(h.cross_block(1, 1), Err(Error::SameLayer(1))));
        assert!(h.exact_block_stats(5).is_err());
    }

    #[test]
    fn binary_dump_round_trip() {
        let q = block_diag_quadratic();
        let h = assemble(&q, &[0.0; 3], AssemblyMethod::BasisHvp, DEFAULT_CAP).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        h.write_binary(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 * (2 + 3 + 9));
        let (m, offsets) = DenseHessian::read_binary(&path).unwrap();
        assert_eq!(&m, h.matrix());
        assert_eq!(offsets, vec![0, 2, 3]);
    }
}
