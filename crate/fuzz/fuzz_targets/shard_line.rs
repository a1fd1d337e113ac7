#![no_main]
use hyperprompt::datagen::parse_shard_line;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rec) = parse_shard_line(data) {
        assert!(!rec.answer.is_empty());
    }
});
