//! Tokenization and the fixed lexical resources used for matching.
//!
//! Tokens are maximal runs of alphanumeric characters; every other
//! non-whitespace character is a punctuation token of its own. Punctuation
//! tokens are kept (with offsets) so sentence boundaries survive, but they
//! never participate in matching or F1.

use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// Surface form as it appears in the source text.
    pub text: String,
    /// Byte offset of the first byte.
    pub start: usize,
    /// Byte offset one past the last byte.
    pub end: usize,
}

impl Token {
    pub fn is_punct(&self) -> bool {
        !self.text.chars().next().is_some_and(char::is_alphanumeric)
    }

    pub fn norm(&self) -> String {
        self.text.to_lowercase()
    }

    pub fn is_capitalized(&self) -> bool {
        self.text.chars().next().is_some_and(char::is_uppercase)
    }

    pub fn ends_sentence(&self) -> bool {
        matches!(self.text.as_str(), "." | "!" | "?")
    }
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            out.push(Token { text: text[s..i].to_string(), start: s, end: i });
        }
        if !ch.is_whitespace() {
            let e = i + ch.len_utf8();
            out.push(Token { text: text[i..e].to_string(), start: i, end: e });
        }
    }
    if let Some(s) = word_start {
        out.push(Token { text: text[s..].to_string(), start: s, end: text.len() });
    }
    out
}

/// Lowercased non-punctuation tokens. This is the token stream F1 is
/// computed over.
pub fn words(text: &str) -> Vec<String> {
    tokenize(text).iter().filter(|t| !t.is_punct()).map(Token::norm).collect()
}

/// Lowercased tokens that are neither punctuation nor stopwords.
pub fn content_words(text: &str) -> Vec<String> {
    words(text).into_iter().filter(|w| !is_stopword(w)).collect()
}

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any",
    "anything", "are", "around", "as", "at", "be", "because", "been", "before", "being", "below",
    "between", "both", "but", "by", "can", "could", "did", "do", "does", "doing", "done", "down",
    "during", "each", "else", "few", "for", "from", "further", "get", "got", "had", "has", "have",
    "having", "he", "her", "here", "hers", "herself", "him", "himself", "his", "how", "i", "if",
    "in", "into", "is", "it", "its", "itself", "just", "know", "like", "me", "more", "most", "much",
    "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other",
    "our", "ours", "out", "over", "own", "please", "s", "said", "same", "say", "she", "should",
    "show", "shows", "so", "some", "such", "t", "tell", "than", "that", "the", "their", "theirs",
    "them", "themselves", "then", "there", "these", "they", "this", "those", "through", "to",
    "too", "under", "until", "up", "us", "very", "was", "we", "were", "what", "when", "where",
    "which", "while", "who", "whom", "why", "will", "with", "would", "yes", "you", "your",
    "yours", "yourself", "anyone", "happened", "happen", "next", "later", "ever", "one", "mean",
    "okay", "ok", "maybe", "really", "something", "thing", "things", "way",
];

/// Pronouns that mark a follow-up as dependent on the previous turn.
pub const TRIGGER_PRONOUNS: &[&str] = &["it", "he", "she", "they", "this", "that", "their"];

fn stopword_set() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.iter().copied().collect())
}

pub fn is_stopword(word: &str) -> bool {
    stopword_set().contains(word)
}

pub fn is_trigger_pronoun(word: &str) -> bool {
    TRIGGER_PRONOUNS.contains(&word)
}
