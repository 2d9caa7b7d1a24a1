//! Tokenization shared by the reference embedder, the reference judge and the
//! prefetcher's query canonicalization.

use std::collections::BTreeSet;

/// Words that carry request framing rather than topic. They are down-weighted
/// by the reference embedder and ignored by the reference judge's content
/// overlap.
const FUNCTION_WORDS: &[&str] = &[
    "a", "about", "all", "am", "an", "and", "any", "anything", "are", "as", "asking", "at", "be",
    "been", "by", "can", "could", "details", "did", "do", "does", "explain", "facts", "find",
    "for", "from", "get", "give", "has", "have", "help", "how", "i", "in", "info",
    "information", "into", "is", "it", "its", "know", "knows", "let", "look", "lookup", "me",
    "more", "my", "need", "of", "on", "or", "our", "please", "pull", "quick", "regarding",
    "search", "show", "some", "tell", "that", "the", "their", "there", "these", "this", "to",
    "up", "us", "want", "was", "we", "were", "what", "whats", "which", "who", "whom", "whose",
    "why", "will", "with", "would", "you", "your",
];

pub fn is_function_word(token: &str) -> bool {
    FUNCTION_WORDS.binary_search(&token).is_ok()
}

/// Lowercases, replaces every non-alphanumeric character with a separator and
/// splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Distinct topical tokens of `text`. Falls back to every token when the text
/// consists solely of function words.
pub fn content_words(text: &str) -> BTreeSet<String> {
    let tokens = tokenize(text);
    let content: BTreeSet<String> = tokens
        .iter()
        .filter(|t| !is_function_word(t))
        .cloned()
        .collect();
    if content.is_empty() {
        tokens.into_iter().collect()
    } else {
        content
    }
}

/// Canonical form used as a Markov-model state: lowercase with collapsed
/// whitespace.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}
