#![no_main]
use hyperprompt::hypergraph::table_to_hypergraph;
use hyperprompt::ingest::{parse_table, TableFormat};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = parse_table(data, TableFormat::Csv) {
        let hg = table_to_hypergraph(&t);
        assert_eq!(hg.n_nodes(), t.n_rows() * t.n_cols());
    }
});
