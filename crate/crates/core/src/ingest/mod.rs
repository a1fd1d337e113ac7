//! Source structures (tables, triple sets), their parsers, and the text
//! serializations fed to the language model.

mod serialize;
mod stats;
mod table;
mod triples;

pub use serialize::{serialize_table, serialize_triples};
pub use stats::{corpus_stats, CorpusStats, StatsAccumulator, TextSample};
pub use table::{parse_table, Table, TableFormat};
pub use triples::{parse_triples, Triple, TripleSet};
