//! Induction-head laboratory: hierarchical synthetic sequences, a small
//! decoder-only transformer with full trace capture and head ablation, and
//! the analysis pipeline that classifies heads, measures context-correct
//! attention, ablates heads and probes head outputs for latent context.

pub mod ablation;
pub mod error;
pub mod circuit;
pub mod heads;
pub mod heatmap;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod probes;
pub mod rng;
pub mod seqgen;
pub mod training;

pub use error::{LabError, Result};
