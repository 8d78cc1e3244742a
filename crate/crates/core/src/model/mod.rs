//! Desk-scale network descriptions and their recorded losses.

mod graph;
mod spec;

pub use graph::{Batch, BatchFile, ExpandedObjective, ModelGraph, ModelObjective, Targets};
pub use spec::{Activation, LayerShape, LayerSpec, LossKind, ModelSpec, SharingMode};
