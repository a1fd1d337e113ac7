/// Byte-level tokenizer: ids `0..256` are raw bytes, followed by four
/// reserved ids.
#[derive(Clone, Copy, Debug, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub const PAD: usize = 256;
    pub const BOS: usize = 257;
    pub const EOS: usize = 258;
    pub const CLS: usize = 259;
    pub const VOCAB: usize = 260;

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    /// Bytes back to text; reserved ids are dropped and invalid UTF-8 (only
    /// possible for generated ids) is replaced.
    pub fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().filter_map(|&i| u8::try_from(i).ok()).collect();
        match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        Self::VOCAB
    }
}
