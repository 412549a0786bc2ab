//! Text normalization shared by the answer scorer, the mock proxies and the stub oracles.

use std::collections::BTreeSet;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

// Function words ignored when measuring lexical overlap. Articles are already
// removed by `normalize`.
const STOPWORDS: &[&str] = &[
    "about", "after", "all", "also", "and", "any", "are", "as", "at", "be", "been", "before",
    "but", "by", "can", "did", "do", "does", "for", "from", "had", "has", "have", "he", "her",
    "his", "how", "i", "in", "into", "is", "it", "its", "many", "much", "not", "of", "on", "or",
    "she", "so", "than", "that", "their", "them", "then", "there", "these", "they", "this", "to",
    "was", "we", "were", "what", "when", "where", "which", "who", "whom", "whose", "why", "will",
    "with", "would", "you",
];

/// Answer normalization: lowercase, strip punctuation, drop articles, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let lowered: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whitespace tokens of the normalized text.
pub fn tokens(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(str::to_owned).collect()
}

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Distinct content-bearing terms: normalized tokens minus stopwords.
pub fn terms(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().filter(|t| !is_stopword(t)).collect()
}

/// Fraction of `query` terms present in `doc`; 0 when the query has no terms.
pub fn overlap_fraction(query: &BTreeSet<String>, doc: &BTreeSet<String>) -> f64 {
    if query.is_empty() {
        return 0.0;
    }
    let hits = query.iter().filter(|t| doc.contains(*t)).count();
    hits as f64 / query.len() as f64
}

/// Byte ranges of the sentences in `body`. A sentence ends at `.`, `!` or `?`
/// followed by whitespace or end of text; ranges exclude surrounding whitespace.
pub fn sentence_spans(body: &str) -> Vec<(usize, usize)> {
    let bytes = body.as_bytes();
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in body.char_indices() {
        if start.is_none() {
            if c.is_whitespace() {
                continue;
            }
            start = Some(i);
        }
        if matches!(c, '.' | '!' | '?') {
            let next = i + c.len_utf8();
            if next >= bytes.len() || body[next..].starts_with(char::is_whitespace) {
                spans.push((start.take().unwrap(), next));
            }
        }
    }
    if let Some(s) = start {
        let end = body.trim_end().len();
        if end > s {
            spans.push((s, end));
        }
    }
    spans
}
