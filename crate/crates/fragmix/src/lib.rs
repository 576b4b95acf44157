//! fragmix: hierarchical token mixing for molecular and stochastic dynamics.
//!
//! The pipeline turns trajectories of residue coordinates into per-residue
//! tokens, merges windows of `w` sequential tokens into fragment tokens
//! through a graph-convolution + MLP module, mixes fragments with an exact
//! blockwise-attention transformer, and trains the whole stack against
//! time-lagged objectives (VAMP-2 or SPIB). Learned state labels feed a
//! Markov state model built by transition counting. Synthetic dynamics with
//! exact transfer-operator oracles make every moving part testable offline.

pub mod config;
pub mod error;
pub mod geometry;
pub mod mixer;
pub mod model;
pub mod msm;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod tmm;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
