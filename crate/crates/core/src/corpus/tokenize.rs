//! Whitespace tokenizer with punctuation detachment.
//!
//! Splits on whitespace, then peels leading/trailing ASCII punctuation off
//! each chunk as separate tokens. Hyphens are never detached, so hyphenated
//! terms ("state-of-the-art") stay whole.

fn is_detachable(c: char) -> bool {
    c.is_ascii_punctuation() && c != '-'
}

/// Tokenizes `text` into surface strings. Empty text gives an empty list.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        let mut leading = Vec::new();
        while lo < hi && is_detachable(chars[lo]) {
            leading.push(chars[lo].to_string());
            lo += 1;
        }
        let mut trailing = Vec::new();
        while hi > lo && is_detachable(chars[hi - 1]) {
            trailing.push(chars[hi - 1].to_string());
            hi -= 1;
        }
        out.extend(leading);
        if lo < hi {
            out.push(chars[lo..hi].iter().collect());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(text: &str) -> Vec<String> {
        tokenize(text)
    }

    #[test]
    fn trailing_period_detaches() {
        assert_eq!(toks("Neural NER."), ["Neural", "NER", "."]);
    }

    #[test]
    fn empty_text_gives_empty_list() {
        assert_eq!(toks(""), Vec::<String>::new());
        assert_eq!(toks("   \t\n"), Vec::<String>::new());
    }

    #[test]
    fn hyphenated_words_stay_whole_and_parens_detach() {
        assert_eq!(
            toks("state-of-the-art (SOTA)"),
            ["state-of-the-art", "(", "SOTA", ")"]
        );
    }

    #[test]
    fn nested_punctuation_peels_in_order() {
        assert_eq!(toks("(e.g.,"), ["(", "e.g", ".", ","]);
        assert_eq!(toks("\"quoted\""), ["\"", "quoted", "\""]);
    }

    #[test]
    fn all_punctuation_chunk_splits_to_chars() {
        assert_eq!(toks("..."), [".", ".", "."]);
    }

    #[test]
    fn interior_punctuation_is_kept() {
        assert_eq!(toks("U.S. F1-score"), ["U.S", ".", "F1-score"]);
    }
}
