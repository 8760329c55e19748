use std::hash::Hasher;

use fnv::FnvHasher;

/// Hashing tokenizer: lowercase, split into maximal alphanumeric runs, and
/// map each token to `fnv1a64(token) mod vocab_size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl Tokenizer {
    pub fn new(vocab_size: usize, max_tokens: usize) -> Self {
        assert!(vocab_size > 0, "vocabulary must be non-empty");
        Self {
            vocab_size,
            max_tokens,
        }
    }

    pub fn token_id(&self, token: &str) -> u32 {
        let mut h = FnvHasher::default();
        h.write(token.as_bytes());
        (h.finish() % self.vocab_size as u64) as u32
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let lower = text.to_lowercase();
        lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .take(self.max_tokens)
            .map(|t| self.token_id(t))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_has_no_tokens() {
        assert!(Tokenizer::new(100, 10).tokenize("").is_empty());
        assert!(Tokenizer::new(100, 10).tokenize("  ,;  ").is_empty());
    }

    #[test]
    fn case_folding() {
        let t = Tokenizer::new(32768, 256);
        assert_eq!(t.tokenize("Staff Engineer"), t.tokenize("staff engineer"));
    }

    #[test]
    fn punctuation_splits_tokens() {
        let t = Tokenizer::new(32768, 256);
        assert_eq!(t.tokenize("rust,go"), t.tokenize("rust go"));
        assert_eq!(t.tokenize("rust,go").len(), 2);
    }

    #[test]
    fn fnv1a_reference_value() {
        // FNV-1a 64 of "a" is 0xaf63dc4c8601ec8c.
        let t = Tokenizer::new(32768, 1);
        assert_eq!(t.token_id("a") as u64, 0xaf63dc4c8601ec8c % 32768);
        let mut h: u64 = 0xcbf29ce484222325;
        for b in b"engineer" {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        assert_eq!(t.token_id("engineer") as u64, h % 32768);
    }

    #[test]
    fn truncates_to_max_tokens() {
        let t = Tokenizer::new(1000, 3);
        assert_eq!(t.tokenize("a b c d e").len(), 3);
    }
}
