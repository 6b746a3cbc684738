//! Heat-level prediction for trending events.

pub mod clustering;
pub mod corpus;
pub mod embedding;
pub mod evalharness;
pub mod fsio;
pub mod llm;
pub mod prompting;
pub mod retrieval;

pub use clustering::{HeatLevel, HeatLevelScheme};
pub use corpus::{Event, EventCorpus};
pub use embedding::{Embedder, EmbeddingVector, VectorStore};
pub use llm::{ChatClient, ModelConfig};
