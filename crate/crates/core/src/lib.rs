//! Backend for a guardrailed, retrieval-augmented cognitive assistant with
//! a human-reviewed feedback loop into its versioned knowledge base.
//!
//! [`system::Assistant`] assembles every module; [`gateway::Gateway`] puts
//! sessions and a route table in front of it.

pub mod acl;
pub mod adapter;
pub mod agent;
pub mod audit;
pub mod backend;
pub mod chunking;
pub mod clock;
pub mod config;
pub mod corpus;
pub mod dialog;
pub mod document;
pub mod embed;
pub mod error;
pub mod feedback;
pub mod gateway;
pub mod guardrail;
pub mod history;
pub mod ids;
pub mod numeric;
pub mod system;
pub mod tools;
pub mod vector_store;

pub use error::{Error, ErrorKind, Result};
pub use system::{Assistant, Setup};

/// Embedding vectors at the precision the service stores and ranks with.
pub type Embedding = embed::EmbeddingVector<f64>;
/// Single-precision embeddings, e.g. for compact experiments.
pub type Embedding32 = embed::EmbeddingVector<f32>;
