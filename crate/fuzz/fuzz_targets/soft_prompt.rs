#![no_main]
use hyperprompt::gformer::{decode_soft_prompt, encode_soft_prompt};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_soft_prompt(data) {
        let back = decode_soft_prompt(&encode_soft_prompt(&t)).expect("round trip");
        assert_eq!(back.shape(), t.shape());
    }
});
