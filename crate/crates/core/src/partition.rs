use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer's contiguous slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ParamGroup {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered decomposition θ = (θ₁, …, θ_L) into disjoint, contiguous groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamPartition {
    groups: Vec<ParamGroup>,
    total: usize,
}

impl ParamPartition {
    /// Lays the groups out back to back in the given order.
    pub fn from_sizes<S: Into<String>>(sizes: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut offset = 0;
        let groups = sizes
            .into_iter()
            .map(|(name, len)| {
                let g = ParamGroup {
                    name: name.into(),
                    offset,
                    len,
                };
                offset += len;
                g
            })
            .collect();
        Self {
            groups,
            total: offset,
        }
    }

    pub fn single(name: &str, len: usize) -> Self {
        Self::from_sizes([(name, len)])
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn layers(&self) -> usize {
        self.groups.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn group(&self, layer: usize) -> Result<&ParamGroup> {
        self.groups.get(layer).ok_or(Error::InvalidLayer {
            layer,
            layers: self.groups.len(),
        })
    }

    pub fn range(&self, layer: usize) -> Result<Range<usize>> {
        Ok(self.group(layer)?.range())
    }

    pub fn size(&self, layer: usize) -> Result<usize> {
        Ok(self.group(layer)?.len)
    }

    pub fn last(&self) -> usize {
        self.groups.len().saturating_sub(1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Zero-padded copy of `block` placed at layer `layer`.
    pub fn embed(&self, layer: usize, block: &[f64]) -> Result<Vec<f64>> {
        let range = self.range(layer)?;
        if block.len() != range.len() {
            return Err(Error::LengthMismatch {
                expected: range.len(),
                got: block.len(),
            });
        }
        let mut out = vec![0.0; self.total];
        out[range].copy_from_slice(block);
        Ok(out)
    }

    /// Per-layer slices of `v`, in group order.
    pub fn split<'a>(&'a self, v: &'a [f64]) -> impl Iterator<Item = &'a [f64]> + 'a {
        self.groups.iter().map(move |g| &v[g.range()])
    }
}
