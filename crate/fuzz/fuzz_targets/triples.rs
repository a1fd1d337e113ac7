#![no_main]
use hyperprompt::hypergraph::triples_to_hypergraph;
use hyperprompt::ingest::parse_triples;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Self loops are rejected at conversion, not at parse time.
    if let Ok(ts) = parse_triples(data) {
        if let Ok(hg) = triples_to_hypergraph(&ts) {
            assert_eq!(hg.n_hyperedges(), 2 * ts.len());
        }
    }
});
