//! Multi-behavior collaborative filtering over a multiplex user-item graph
//! with learnable per-behavior intent hypergraphs and contrastive
//! regularization at the node and graph level.

pub mod cli;
pub mod corelin;
pub mod data;
pub mod diag;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hypergraph;
pub mod model;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};
