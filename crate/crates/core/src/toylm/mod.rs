//! Small decoder-only byte-level language model.

mod model;
mod tokenizer;

pub use model::{Block, KvCache, PromptPlacement, PromptText, ToyLm, ToyLmConfig, LORA_PREFIX, PREFIX};
pub use tokenizer::Tokenizer;
