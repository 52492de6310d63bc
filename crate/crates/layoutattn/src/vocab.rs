//! Closed token vocabulary shared by the parser, the layout predictor and
//! the toy generator: 24 nouns in 6 super-categories of 4, 8 colors, plus
//! the function words and punctuation the grammar needs.

use sha2::{Digest, Sha256};

pub const SUPER_CATEGORIES: [(&str, [&str; 4]); 6] = [
    ("vehicles", ["car", "bus", "truck", "bicycle"]),
    ("animals", ["dog", "cat", "bird", "horse"]),
    ("furniture", ["bed", "chair", "table", "sofa"]),
    ("food", ["sandwich", "carrot", "cake", "pizza"]),
    ("electronics", ["laptop", "phone", "keyboard", "monitor"]),
    ("household", ["mailbox", "lamp", "clock", "vase"]),
];

pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "black", "white", "orange", "purple",
];

/// Words with no content role: articles, verbs, relation words, connectives,
/// the local-caption word "photo", and structural punctuation.
pub const FUNCTION_WORDS: [&str; 32] = [
    "a", "an", "the", "there", "is", "also", "sits", "stands", "rests", "placed", "positioned",
    "to", "left", "right", "of", "on", "side", "at", "above", "below", "high", "just", "directly",
    "up", "beneath", "under", "underneath", "and", "while", "photo", ",", ".",
];

pub const NOUN_COUNT: usize = 24;
pub const COLOR_COUNT: usize = 8;

pub fn nouns() -> impl Iterator<Item = &'static str> {
    SUPER_CATEGORIES.iter().flat_map(|(_, ns)| ns.iter().copied())
}

/// All tokens in id order: function words, then nouns, then colors.
pub fn all_tokens() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = FUNCTION_WORDS.to_vec();
    v.extend(nouns());
    v.extend(COLORS);
    v
}

pub fn vocab_size() -> usize {
    FUNCTION_WORDS.len() + NOUN_COUNT + COLOR_COUNT
}

pub fn token_id(tok: &str) -> Option<usize> {
    all_tokens().iter().position(|t| *t == tok)
}

pub fn noun_index(noun: &str) -> Option<usize> {
    nouns().position(|n| n == noun)
}

pub fn color_index(color: &str) -> Option<usize> {
    COLORS.iter().position(|c| *c == color)
}

pub fn super_category_of(noun: &str) -> Option<usize> {
    SUPER_CATEGORIES.iter().position(|(_, ns)| ns.contains(&noun))
}

pub fn is_function_word(tok: &str) -> bool {
    FUNCTION_WORDS.contains(&tok)
}

/// SHA-256 over the newline-joined token list; checkpoints store it so a
/// model is never applied to a different vocabulary.
pub fn vocab_hash() -> String {
    let mut h = Sha256::new();
    h.update(all_tokens().join("\n").as_bytes());
    format!("{:x}", h.finalize())
}

/// Splits text into lowercase tokens; "," and "." are standalone tokens.
/// Returns (token, byte offset of its first character).
pub fn tokenize(text: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    let mut word_start = None::<usize>;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() || ch == ',' || ch == '.' {
            if let Some(s) = word_start.take() {
                out.push((text[s..i].to_lowercase(), s));
            }
            if ch == ',' || ch == '.' {
                out.push((ch.to_string(), i));
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        out.push((text[s..].to_lowercase(), s));
    }
    out
}
