//! WordPiece tokenization over a BERT-style vocabulary file.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    /// Doubles as the end-of-caption marker during generation.
    pub sep: u32,
    pub mask: u32,
}

impl Vocab {
    /// Builds a vocabulary where position is id.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Line {
                    path: "<vocab>".into(),
                    line: i + 1,
                    detail: format!("duplicate token {t:?}"),
                });
            }
        }
        let special = |name: &str| {
            index.get(name).copied().ok_or_else(|| Error::Line {
                path: "<vocab>".into(),
                line: 0,
                detail: format!("missing special token {name}"),
            })
        };
        Ok(Self {
            pad: special(PAD)?,
            unk: special(UNK)?,
            cls: special(CLS)?,
            sep: special(SEP)?,
            mask: special(MASK)?,
            tokens,
            index,
        })
    }

    /// The five special tokens (ids 0..5) followed by `words`.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(words.iter().map(|s| s.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    /// One token per line; the line number is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        Self::from_tokens(tokens).map_err(|e| match e {
            Error::Line { line, detail, .. } => Error::Line {
                path: path.to_path_buf(),
                line,
                detail,
            },
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::Range {
                id: id as usize,
                size: self.tokens.len(),
            })
    }

    pub fn specials(&self) -> Specials {
        Specials {
            pad: self.pad,
            unk: self.unk,
            cls: self.cls,
            sep: self.sep,
            mask: self.mask,
        }
    }

    pub fn is_special(&self, id: u32) -> bool {
        [self.pad, self.unk, self.cls, self.sep, self.mask].contains(&id)
    }

    /// Lowercased, whitespace- and punctuation-split, greedy longest-match
    /// WordPiece. Words that cannot be fully covered become `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in pre_tokenize(text) {
            self.encode_word(&word, &mut ids);
        }
        ids
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Joins pieces back into words, dropping special tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id)?;
            if self.is_special(id) {
                continue;
            }
            if let Some(rest) = tok.strip_prefix("##") {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        Ok(out)
    }
}

fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

/// Special-token ids the model needs without holding the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Visual = 0,
    Concept = 1,
    Caption = 2,
}

/// Token ids with per-position segment and position labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
    pub positions: Vec<usize>,
}

impl TokenSequence {
    pub fn push(&mut self, id: u32, segment: Segment, position: usize) {
        self.ids.push(id);
        self.segments.push(segment);
        self.positions.push(position);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
pub(crate) fn toy_vocab(words: &[&str]) -> Vocab {
    Vocab::with_words(words).unwrap()
}
