//! Synthetic query and answer text.
//!
//! A topic is a handful of pseudo-words that no other topic uses. A query is
//! a phrasing frame built only from function words wrapped around the topic
//! words in a shuffled order, so every paraphrase of a topic has the same
//! content words and topics never share one.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::text::is_function_word;

const PREFIXES: &[&str] = &[
    "",
    "what is",
    "tell me about",
    "find",
    "search for",
    "i need info on",
    "can you look up",
    "what do you know about",
    "give me details on",
    "show me",
    "info about",
    "help me find",
    "explain",
    "what are the facts on",
    "could you find",
    "i want to know about",
    "please tell me about",
    "look up",
    "we need information regarding",
    "any details about",
];

const SUFFIXES: &[&str] = &["", "please", "for me", "for us", "with details"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// A phrasing frame: `prefix <topic words> suffix`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame {
    pub prefix: &'static str,
    pub suffix: &'static str,
}

/// Every available frame, in a fixed order.
pub fn frames() -> Vec<Frame> {
    PREFIXES
        .iter()
        .flat_map(|&prefix| SUFFIXES.iter().map(move |&suffix| Frame { prefix, suffix }))
        .collect()
}

/// `n` distinct three-syllable pseudo-words.
pub fn pseudo_words(n: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut w = String::with_capacity(6);
        for _ in 0..3 {
            w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
        }
        if !is_function_word(&w) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// One surface form: the frame around a fresh shuffle of `words`.
pub fn render(frame: Frame, words: &[String], rng: &mut impl Rng) -> String {
    let mut words = words.to_vec();
    words.shuffle(rng);
    [frame.prefix, &words.join(" "), frame.suffix]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Wording that steers the staticity lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerFlavor {
    /// No staticity cues.
    Neutral,
    /// Fact cues only.
    Static,
    /// Temporal cues only.
    Ephemeral,
}

/// Canonical answer for a topic: the topic words, flavor cues, then
/// `filler` words to pad the size.
pub fn answer_text(key: &str, words: &[String], flavor: AnswerFlavor, filler: &[String]) -> String {
    let cues = match flavor {
        AnswerFlavor::Neutral => "",
        AnswerFlavor::Static => " historical record: founded and located as the source says.",
        AnswerFlavor::Ephemeral => " latest live update today, trending news.",
    };
    format!("answer {key}: {}.{cues} {}", words.join(" "), filler.join(" "))
}
