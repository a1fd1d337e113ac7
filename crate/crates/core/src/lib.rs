//! Structured-data grounding for small language models.
//!
//! Tables and knowledge-graph triples are converted into a single hypergraph
//! form ([`hypergraph`]), encoded with set-attention message passing
//! ([`encoder`]), compressed into a fixed number of query embeddings
//! ([`gformer`]) and appended as soft prompts to a byte-level decoder
//! ([`toylm`]). [`pipeline`] wires the pieces together for instruction tuning
//! and the ablation modes; [`train`] holds the optimizer and schedules.

pub mod datagen;
pub mod encoder;
pub mod error;
pub mod gformer;
mod hash;
pub mod hypergraph;
pub mod ingest;
pub mod numerics;
pub mod pipeline;
pub mod toylm;
pub mod train;

pub use error::{Error, Result};
