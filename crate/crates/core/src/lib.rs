//! Likelihood-based clustering of single-cell electropherograms (scEPGs)
//! from forensic DNA mixtures.
//!
//! The library groups scEPGs by contributor with an incremental,
//! likelihood-scored beam search over (partially labelled) set partitions,
//! provides hierarchical agglomerative baselines, and turns the surviving
//! partitions into number-of-contributor posteriors and likelihood ratios
//! for persons of interest.

pub mod cli;
pub mod combinatorics;
pub mod error;
pub mod genetics;
pub mod inference;
pub mod partition;
pub mod peakmodel;
pub mod search;
pub mod simulator;

pub use error::{Error, Result};
