use std::sync::atomic::{AtomicUsize, Ordering};

/// Reserved id prepended to every sequence; an empty text encodes to `[BOS]`.
pub const BOS: usize = 0;

/// Lowercasing word/punctuation splitter with hash-bucketed ids.
#[derive(Debug)]
pub struct Tokenizer {
    vocab_size: usize,
    max_len: usize,
    truncated: AtomicUsize,
}

impl Tokenizer {
    pub fn new(vocab_size: usize, max_len: usize) -> Self {
        Tokenizer {
            vocab_size,
            max_len,
            truncated: AtomicUsize::new(0),
        }
    }

    /// Splits on whitespace; runs of alphanumerics form words and every other
    /// character is its own token.
    pub fn pieces(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for ch in text.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() {
                word.push(ch);
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }

    pub fn id_of(&self, piece: &str) -> usize {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in piece.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        1 + (h % (self.vocab_size as u64 - 1)) as usize
    }

    /// `[BOS, ids...]`, truncated to `max_len` ids. Truncations are counted.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(Self::pieces(text).iter().map(|p| self.id_of(p)));
        if ids.len() > self.max_len {
            ids.truncate(self.max_len);
            self.truncated.fetch_add(1, Ordering::Relaxed);
        }
        ids
    }

    /// How many texts have been cut to `max_len` so far.
    pub fn truncation_count(&self) -> usize {
        self.truncated.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(
            Tokenizer::pieces("Liver size increased (hepatomegaly)."),
            vec!["liver", "size", "increased", "(", "hepatomegaly", ")", "."]
        );
    }

    #[test]
    fn empty_text_is_bos_only() {
        let t = Tokenizer::new(100, 8);
        assert_eq!(t.encode(""), vec![BOS]);
        assert_eq!(t.encode("   "), vec![BOS]);
    }

    #[test]
    fn ids_stay_in_range_and_skip_bos() {
        let t = Tokenizer::new(7, 64);
        for id in t.encode("a b c d e f g h i j k l m n o p") {
            assert!(id < 7);
        }
        assert!(t.encode("x y z")[1..].iter().all(|&id| id != BOS));
    }

    #[test]
    fn overlong_text_is_truncated_and_counted() {
        let t = Tokenizer::new(100, 4);
        assert_eq!(t.encode("one two three four five").len(), 4);
        assert_eq!(t.encode("one").len(), 2);
        assert_eq!(t.truncation_count(), 1);
    }
}
