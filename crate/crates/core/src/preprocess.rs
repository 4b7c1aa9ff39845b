//! Text cleaning and token-sequence shaping for the embedding channel.
//!
//! Cleaning applies to the embedding channel only. Dependency parsing gets
//! the original text (parsers need punctuation), and lexicon counting gets
//! the cleaned text lowercased.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved padding symbol.
pub const PAD_TOKEN: &str = "[PAD]";

/// Default token budget per document.
pub const DEFAULT_MAX_TOKENS: usize = 300;

fn url_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:https?://|www\.)\S+").expect("static regex"))
}

fn html_tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[^>]*>").expect("static regex"))
}

/// Remove URLs, then HTML tags, then every character that is neither a
/// Unicode letter nor whitespace; collapse whitespace runs and trim.
pub fn clean_text(text: &str) -> String {
    let no_urls = url_regex().replace_all(text, " ");
    let no_tags = html_tag_regex().replace_all(&no_urls, " ");
    let letters: String = no_tags
        .chars()
        .map(|c| {
            if c.is_alphabetic() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    letters.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whitespace word tokenization of cleaned, lowercased text. This is the
/// word notion used by the lexicon channel and by length rules.
pub fn content_words(text: &str) -> Vec<String> {
    clean_text(text)
        .to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// A token sequence shaped to exactly `max_len` entries, padded with
/// [`PAD_TOKEN`] as a suffix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
    real_len: usize,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn max_len(&self) -> usize {
        self.tokens.len()
    }

    /// Number of non-pad tokens.
    pub fn real_len(&self) -> usize {
        self.real_len
    }

    /// True at positions holding a real token, false at pad positions.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.tokens.len()).map(|i| i < self.real_len).collect()
    }
}

/// Truncate to the first `max_len` tokens or right-pad to exactly `max_len`.
pub fn shape_tokens<S: Into<String>>(
    tokens: impl IntoIterator<Item = S>,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut shaped: Vec<String> = tokens
        .into_iter()
        .take(max_len)
        .map(Into::into)
        .collect();
    let real_len = shaped.len();
    shaped.resize(max_len, PAD_TOKEN.to_owned());
    Ok(TokenSequence {
        tokens: shaped,
        real_len,
    })
}

/// Clean, whitespace-tokenize and shape a document for the embedding channel.
pub fn embedding_tokens(text: &str, max_len: usize) -> Result<TokenSequence> {
    shape_tokens(clean_text(text).split_whitespace(), max_len)
}
