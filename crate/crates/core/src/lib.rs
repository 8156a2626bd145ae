//! Knowledge-graph-grounded conversational recommender.
//!
//! The crate builds a movie knowledge graph from domain records, encodes it
//! with a relational graph convolution network, recommends unmentioned items
//! from dialog history, and generates responses with a transformer whose
//! vocabulary logits are fused with entity scores. Training, evaluation
//! metrics, checkpointing, and a synthetic corpus generator round out the
//! pipeline.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod kg;
pub mod math;
pub mod recommender;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
