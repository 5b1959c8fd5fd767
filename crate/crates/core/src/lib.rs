//! Unsupervised traffic-scene analysis from quantized motion words.
//!
//! Activities are learned with a hierarchical Dirichlet process, traffic
//! states with an HDP hidden Markov model, and new clips are classified with
//! Gaussian-process models fused with the learned state transitions.

pub mod anomaly;
pub mod codebook;
pub mod dp;
pub mod error;
pub mod fusion;
pub mod gp;
pub mod hdp;
pub mod hdphmm;
pub mod io;
pub mod online;
pub mod representation;
pub mod synth;

pub use error::{Error, Result};
