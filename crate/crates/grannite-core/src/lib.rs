//! Inference optimization toolkit for graph neural networks on simulated
//! heterogeneous accelerators (CPU + matrix engine + vector DSP).
//!
//! The crate is organized around three stages: reference layer semantics
//! ([`reference`]), verifiable transformation passes over an operator-graph
//! IR ([`ir`], [`lower`], [`transforms`], [`sparsity`], [`quant`]), and a
//! calibratable execution model ([`cost`], [`exec`]) with a CPU/NPU
//! partitioner. Every pass is either exact (output preserved to float
//! tolerance) or carries a declared approximation contract checked by the
//! verification harness ([`pipeline`], [`cli`]).

pub mod cli;
pub mod cost;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod graph;
pub mod ir;
pub mod lower;
pub mod pipeline;
pub mod quant;
pub mod reference;
pub mod sparsity;
pub mod transforms;

pub use error::{Error, Result};

/// Logit assigned to non-edges before attention softmax. Large enough that
/// `exp` underflows to zero in f32 after row-max subtraction.
pub const LARGE_NEG: f32 = 1.0e4;
