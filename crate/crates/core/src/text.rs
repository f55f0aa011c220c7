//! Tokenization and contiguous phrase search shared by the corpus and tagger.

/// Lowercased maximal runs of ASCII alphanumerics.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
        .collect()
}

/// Start offsets of every occurrence of `phrase` in `tokens`.
pub fn find_phrase<'a, S: AsRef<str>>(
    tokens: &'a [S],
    phrase: &'a [String],
) -> impl Iterator<Item = usize> + 'a {
    let n = phrase.len();
    let last = if n == 0 || n > tokens.len() {
        0
    } else {
        tokens.len() - n + 1
    };
    (0..last).filter(move |&start| {
        tokens[start..start + n]
            .iter()
            .zip(phrase)
            .all(|(t, p)| t.as_ref() == p)
    })
}

pub fn contains_phrase<S: AsRef<str>>(tokens: &[S], phrase: &[String]) -> bool {
    find_phrase(tokens, phrase).next().is_some()
}

/// Collapse runs of whitespace to a single space and trim.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenize_splits_on_punctuation() {
        assert_eq!(toks("Bone-mets, T2N1!"), vec!["bone", "mets", "t2n1"]);
        assert!(toks("  ... ").is_empty());
    }

    #[test]
    fn finds_overlapping_occurrences() {
        let t = toks("a a a");
        let p = toks("a a");
        assert_eq!(find_phrase(&t, &p).collect::<Vec<_>>(), vec![0, 1]);
        assert!(!contains_phrase(&t, &toks("a a a a")));
        assert!(!contains_phrase(&t, &[]));
    }
}
