//! Vocabulary constants and the fixed word-to-token mapping used for
//! relation descriptions. Datasets carry integer token ids directly;
//! the only text ever tokenized at runtime are relation templates.

/// Reserved padding token.
pub const PAD: u32 = 0;
/// Reserved end-of-text token; every token list carries exactly one.
pub const EOT: u32 = 1;
/// First token id available for content.
pub const FIRST_CONTENT: u32 = 2;

/// Stable FNV-1a hash; the std hasher is not guaranteed stable across
/// releases and this mapping must reproduce bit-for-bit.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Map one word into the content range `[FIRST_CONTENT, vocab_size)`.
pub fn word_token(word: &str, vocab_size: usize) -> u32 {
    let span = vocab_size as u64 - FIRST_CONTENT as u64;
    FIRST_CONTENT + (fnv1a(word.as_bytes()) % span) as u32
}

/// Tokenize a whitespace-separated template and append EOT.
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    let mut out: Vec<u32> = text
        .split_whitespace()
        .map(|w| word_token(w, vocab_size))
        .collect();
    out.push(EOT);
    out
}

/// Number of EOT occurrences in a token list.
pub fn count_eot(tokens: &[u32]) -> usize {
    tokens.iter().filter(|&&t| t == EOT).count()
}
