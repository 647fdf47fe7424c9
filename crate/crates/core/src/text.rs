//! Caption and subquery normalization.
//!
//! Text is NFC-normalized and lowercased, then split on whitespace and
//! punctuation. Hyphens and apostrophes survive only between two
//! alphanumeric characters ("black-capped", "bird's").

use unicode_normalization::UnicodeNormalization;

/// Options for lexical matching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MatchOptions {
    /// Strip a trailing plural "s" from tokens ("birds" -> "bird").
    #[serde(default)]
    pub strip_plurals: bool,
}

fn is_joiner(c: char) -> bool {
    matches!(c, '-' | '\'' | '\u{2019}' | '\u{2010}' | '\u{2011}')
}

/// Tokenize `text` into normalized tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: Vec<char> = text
        .nfc()
        .flat_map(char::to_lowercase)
        .collect::<String>()
        .nfc()
        .collect();

    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in normalized.iter().enumerate() {
        if c.is_alphanumeric() {
            current.push(c);
        } else if is_joiner(c)
            && !current.is_empty()
            && normalized.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            // curly apostrophe folds to ASCII so both spellings match
            current.push(if c == '\u{2019}' { '\'' } else { c });
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Tokenize with matching options applied.
pub fn tokenize_with(text: &str, opts: MatchOptions) -> Vec<String> {
    let mut tokens = tokenize(text);
    if opts.strip_plurals {
        for t in &mut tokens {
            strip_plural(t);
        }
    }
    tokens
}

fn strip_plural(token: &mut String) {
    if token.chars().count() > 3 && token.ends_with('s') && !token.ends_with("ss") {
        token.pop();
    }
}

/// Canonical form used to compare subqueries for duplicates.
pub fn canonical(text: &str) -> String {
    tokenize(text).join(" ")
}

/// True when `needle` occurs as a contiguous run inside `haystack`.
pub fn contains_phrase<T: PartialEq>(haystack: &[T], needle: &[T]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}
