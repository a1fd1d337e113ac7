#![no_main]
use hyperprompt::hypergraph::HyperGraph;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(hg) = HyperGraph::from_json(data) {
        let again = HyperGraph::from_json(hg.to_json().as_bytes()).expect("round trip");
        assert_eq!(again.to_json(), hg.to_json());
        let _ = hg.structure_text();
    }
});
