//! Transformer configuration, IR construction and graph passes.

pub mod config;
pub mod graph;
pub mod passes;
pub mod weights;

pub use config::{Activation, ModelConfig, Norm};
pub use graph::{build_ir, DType, EltwiseOp, IrGraph, IrNode, OpKind, StageHint, TensorId, TensorRef, TensorRole};
pub use passes::{fuse_layers, optimize, remove_views};
pub use weights::{linear_shapes, read_weights, synthesize_weights, write_weights, DenseWeight, WeightSet};
