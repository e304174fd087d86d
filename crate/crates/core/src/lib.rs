//! Graph learning under distribution shift, organized around a
//! mixture-of-aligned-experts model.
//!
//! The crate models distribution shifts on graphs as stochastic transform
//! functions (node drops, edge noise, feature corruption, ...). A gating
//! network scores which transforms an input was subjected to, one expert per
//! transform component produces a representation invariant to that component,
//! and the gate's scores mix the experts into a single representation that a
//! downstream classifier consumes. Training aligns every expert with a
//! reference expert that only ever sees untransformed data, so the mixed
//! representation stays in one shared space no matter which shift occurred.
//!
//! Modules:
//! - [`graph`]: attributed graph type, dataset splits, pooling.
//! - [`io`]: on-disk dataset formats (CSV node datasets, JSONL graph datasets).
//! - [`transforms`]: the stochastic transform library and composite sampling.
//! - [`nn`]: a small tape-based reverse-mode autodiff engine and GNN layers.
//! - [`model`]: the gate + experts + classifier bundle and checkpointing.
//! - [`train`]: the two-part objective and training loops (plus ERM baselines).
//! - [`eval`]: per-environment metrics, expert invariance, shift discovery.
//! - [`synth`]: seeded synthetic dataset generators.
//!
//! Everything is deterministic given a root seed: all randomness flows through
//! named [`seed`] streams, and node-order-sensitive reductions use correctly
//! rounded summation so results are reproducible bit for bit.

pub mod eval;
pub mod graph;
pub mod io;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod seed;
pub mod synth;
pub mod train;
pub mod transforms;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A graph violated a structural invariant (reported by `validate_graph`).
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    /// Matrix or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument was outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A transform needed edge features the graph does not carry.
    #[error("transform {0} requires edge features but the graph has none")]
    MissingEdgeFeatures(&'static str),

    /// Dataset splitting produced an empty part.
    #[error("invalid split: {0}")]
    InvalidSplit(String),

    /// A dataset file or record did not match the documented format.
    #[error("dataset format error: {0}")]
    Format(String),

    /// Training aborted because the loss stopped being finite.
    #[error("training diverged: loss non-finite for {steps} consecutive steps (first at step {first_step})")]
    Diverged { steps: usize, first_step: usize },

    /// A checkpoint does not match the model or transform set it is loaded for.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
