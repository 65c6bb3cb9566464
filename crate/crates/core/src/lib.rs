//! Continual multimodal knowledge-graph reasoning.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: snapshot sequences, deltas, validation, centrality statistics
//!   and the per-entity modality store.
//! - [`numerics`]: dense `f64` tensors, a reverse-mode tape, fused loss
//!   primitives, Adam and a finite-difference gradient checker.
//! - [`backbone`]: the multimodal entity encoder, the contextual encoder and
//!   TuckER scoring, plus checkpoints.
//! - [`curriculum`], [`preservation`], [`replay`]: the three continual-learning
//!   mechanisms (curriculum ordering, knowledge preservation against a frozen
//!   previous model, importance-sampled contrastive replay).
//! - [`trainer`]: the snapshot loop, two-stage optimisation, baselines and
//!   ablations.
//! - [`bench`]: builds evolving snapshot benchmarks from a static graph.
//! - [`eval`]: filtered ranking, continual metrics, error analysis and reports.
//! - [`cli`]: the `mrckg` command line.

pub mod backbone;
pub mod bench;
pub mod cli;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod graph;
pub mod numerics;
pub mod preservation;
pub mod replay;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
