//! Whitespace/punctuation tokenizer and a small corpus-built vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

const ABBREVIATIONS: &[&str] = &[
    "Mr.", "Ms.", "Mrs.", "Dr.", "St.", "Jr.", "Sr.", "Gov.", "Sen.",
];
const LEADING: &[char] = &['"', '\'', '(', '['];
const TRAILING: &[char] = &[',', '.', ';', ':', '!', '?', '"', '\'', ')', ']'];

/// Splits text on whitespace and peels punctuation off word boundaries.
/// Known honorific abbreviations ("Ms.", "Dr.") keep their period.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut rest = word;
        while let Some(c) = rest.chars().next() {
            if LEADING.contains(&c) && rest.len() > c.len_utf8() {
                out.push(c.to_string());
                rest = &rest[c.len_utf8()..];
            } else {
                break;
            }
        }
        if ABBREVIATIONS.contains(&rest) {
            out.push(rest.to_string());
            continue;
        }
        let mut trailing = Vec::new();
        while let Some(c) = rest.chars().last() {
            if TRAILING.contains(&c) && rest.len() > c.len_utf8() {
                if ABBREVIATIONS.contains(&rest) {
                    break;
                }
                trailing.push(c.to_string());
                rest = &rest[..rest.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.push(rest.to_string());
        out.extend(trailing.into_iter().rev());
    }
    out
}

/// Inverse of [`tokenize`] for text produced by it.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for tok in tokens {
        let tok = tok.as_ref();
        let closing = tok.len() == 1
            && TRAILING.contains(&tok.chars().next().unwrap_or(' '))
            && !matches!(tok, "\"" | "'");
        if !out.is_empty() && !closing && !glue_next {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = matches!(tok, "(" | "[");
    }
    out
}

/// Case-fold and whitespace-collapse, used for entity dedup and matching.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from token sequences. Tokens seen fewer than
    /// `min_count` times are dropped; at most `max_size` entries including
    /// the four specials. Ties in frequency are ordered lexicographically.
    pub fn build<'a, I>(sequences: I, min_count: usize, max_size: usize) -> Vocab
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for tok in seq {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && ![PAD, BOS, EOS, UNK].contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size.saturating_sub(4))
                .map(|(t, _)| t.to_string()),
        );
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD_ID | BOS_ID | EOS_ID))
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}
