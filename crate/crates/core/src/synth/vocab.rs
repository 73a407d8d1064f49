//! Word-level vocabulary with fixed special ids.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Separates question from answer; rendered as `</a>`.
pub const SEP: usize = 3;

pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "star", "hexagon", "cross"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const NUMBERS: [&str; 9] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "</a>"];
const WORDS: [&str; 18] = [
    ".", ":", "what", "color", "is", "the", "shape", "how", "many", "objects", "object", "appears", "in", "frame",
    "and", "row", "column", "there",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::standard()
    }
}

impl Vocabulary {
    /// Specials, function words, then shapes, colors and numbers.
    pub fn standard() -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .chain(&WORDS)
            .chain(&SHAPES)
            .chain(&COLORS)
            .chain(&NUMBERS)
            .map(|s| s.to_string())
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace split; every word must be known.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut oov = Vec::new();
        for w in text.split_whitespace() {
            match self.id(w) {
                Some(i) => ids.push(i),
                None => oov.push(w.to_string()),
            }
        }
        if oov.is_empty() {
            Ok(ids)
        } else {
            Err(Error::OutOfVocabulary(oov))
        }
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.token(i).ok_or(Error::Index {
                    what: "token id",
                    index: i,
                    bound: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Text up to (not including) the first EOS, with PAD and BOS dropped.
    pub fn render_generation(&self, ids: &[usize]) -> Result<String> {
        let body: Vec<usize> = ids
            .iter()
            .copied()
            .take_while(|&i| i != EOS)
            .filter(|&i| i != PAD && i != BOS)
            .collect();
        self.detokenize(&body)
    }
}
