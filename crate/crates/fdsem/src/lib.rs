//! A training and inference engine for functional distributional semantics.
//!
//! Word meanings are represented as binary classifiers ("semantic functions")
//! over latent feature vectors ("pixies"), one pixie per node of a semantic
//! dependency graph. A cardinality-restricted energy-based world model
//! couples the pixies along labelled dependencies, a one-layer classifier per
//! predicate maps pixies to truth probabilities, and a predicate is generated
//! for each node in proportion to its probability of being true. Inference of
//! the latent pixies is amortised by a two-layer graph-convolutional network
//! that predicts per-node mean-field activation vectors; training combines
//! likelihood gradients for the generative side (with belief propagation
//! pulling the encoder's predictions toward the prior) and a divergence
//! objective for the encoder.
//!
//! Module map:
//!
//! - [`graph`]: dependency graphs, vocabularies, corpus and benchmark formats
//! - [`world`]: the energy-based prior, exact enumeration, cardinality
//!   marginals, belief-propagation refinement
//! - [`lexicon`]: semantic functions and generation probabilities
//! - [`encoder`]: the graph-convolutional inference network
//! - [`train`]: objectives, hand-derived gradients, Adam, the epoch loop
//! - [`oracle`]: exact brute-force posterior, divergence, and likelihood
//! - [`eval`]: logical inference over a trained model and benchmark metrics
//! - [`verify`]: finite-difference and oracle-agreement suites
//! - [`checkpoint`] / [`config`]: persistence and run configuration

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod lexicon;
pub mod oracle;
pub mod train;
pub mod util;
pub mod verify;
pub mod world;

pub use error::{Error, Result};
