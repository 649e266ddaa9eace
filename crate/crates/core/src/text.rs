//! Word tokenization shared by corpus filtering and chunking.

/// Splits on Unicode whitespace; punctuation stays attached to its word.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

pub fn word_count(text: &str) -> usize {
    words(text).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_stays_attached() {
        let w: Vec<_> = words("  Hello,  world!\tthis\u{00A0}is\nfine ").collect();
        assert_eq!(w, ["Hello,", "world!", "this", "is", "fine"]);
    }

    #[test]
    fn empty_has_no_words() {
        assert_eq!(word_count(" \n\t "), 0);
    }
}
