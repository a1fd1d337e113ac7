#![no_main]
use hyperprompt::numerics::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = decode(data) {
        let bytes = encode(&store);
        assert_eq!(encode(&decode(&bytes).expect("round trip")), bytes);
    }
});
