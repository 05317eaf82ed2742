//! Word-level tokenizer.
//!
//! Text is split on whitespace; inside each whitespace-delimited chunk,
//! punctuation characters become their own pieces. Pieces that continue a
//! chunk (no space before them) are stored with a `##` prefix, which is what
//! makes `detokenize(tokenize(t)) == t` hold for single-spaced text.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const IMG_OPEN: u32 = 4;
pub const IMG_CLOSE: u32 = 5;

pub const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "[IMG]", "[/IMG]"];

/// Prefix of a piece that continues the previous one without a space.
pub const GLUE: &str = "##";
const PUNCT: &[char] = &['.', ',', ';', ':', '?', '!', '(', ')', '"'];

/// Token ids with a per-position loss mask (1 = scored, 0 = context only).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, scored: bool) -> Self {
        let mask = vec![u8::from(scored); ids.len()];
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Same ids, every position masked out of the loss.
    pub fn as_context(mut self) -> Self {
        self.mask.iter_mut().for_each(|m| *m = 0);
        self
    }

    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut mask = self.mask.clone();
        mask.extend_from_slice(&other.mask);
        TokenSequence { ids, mask }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.ids.len() != self.mask.len() {
            return Err(Error::InvalidInput(format!(
                "token ids ({}) and mask ({}) differ in length",
                self.ids.len(),
                self.mask.len()
            )));
        }
        if let Some(bad) = self.ids.iter().find(|&&i| i as usize >= vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::InvalidInput("loss mask entries must be 0 or 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
    char_fallback: bool,
}

fn split_chunk(chunk: &str) -> Vec<String> {
    let mut pieces: Vec<String> = Vec::new();
    let mut cur = String::new();
    for ch in chunk.chars() {
        if PUNCT.contains(&ch) {
            if !cur.is_empty() {
                pieces.push(std::mem::take(&mut cur));
            }
            pieces.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        pieces.push(cur);
    }
    pieces
        .into_iter()
        .enumerate()
        .map(|(i, p)| if i == 0 { p } else { format!("{GLUE}{p}") })
        .collect()
}

/// Splits text into vocabulary pieces (with glue markers).
pub fn pieces(text: &str) -> Vec<String> {
    text.split_whitespace().flat_map(split_chunk).collect()
}

fn fallback_chars() -> impl Iterator<Item = String> {
    (0x21u8..0x7f).flat_map(|b| {
        let c = (b as char).to_string();
        [c.clone(), format!("{GLUE}{c}")]
    })
}

impl Tokenizer {
    /// Builds a vocabulary from every piece that occurs in `texts`. Word
    /// entries follow the reserved tokens in lexicographic order so the
    /// vocabulary does not depend on corpus ordering.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, char_fallback: bool) -> Self {
        let mut set: BTreeSet<String> = texts.into_iter().flat_map(pieces).collect();
        if char_fallback {
            set.extend(fallback_chars());
        }
        for r in RESERVED {
            set.remove(r);
        }
        let words = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_words(words, char_fallback).expect("reserved tokens are in place")
    }

    /// Restores a tokenizer from its ordered word list (as stored in checkpoints).
    pub fn from_words(words: Vec<String>, char_fallback: bool) -> Result<Self> {
        if words.len() < RESERVED.len() || words.iter().zip(RESERVED).any(|(w, r)| w != r) {
            return Err(Error::InvalidInput("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words, index, char_fallback })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn char_fallback(&self) -> bool {
        self.char_fallback
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Encodes text; every position is scored. Unknown words become `<unk>`
    /// unless character fallback is enabled.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::new();
        for piece in pieces(text) {
            if let Some(id) = self.id(&piece) {
                ids.push(id);
                continue;
            }
            if self.char_fallback {
                let (glued, body) = match piece.strip_prefix(GLUE) {
                    Some(rest) => (true, rest),
                    None => (false, piece.as_str()),
                };
                let mut spelled = Vec::new();
                for (i, ch) in body.chars().enumerate() {
                    let key = if i == 0 && !glued { ch.to_string() } else { format!("{GLUE}{ch}") };
                    spelled.push(self.id(&key).unwrap_or(UNK));
                }
                ids.extend(spelled);
            } else {
                ids.push(UNK);
            }
        }
        TokenSequence::new(ids, true)
    }

    /// Encodes an answer: the text followed by the end token.
    pub fn tokenize_target(&self, text: &str) -> TokenSequence {
        let mut seq = self.tokenize(text);
        seq.ids.push(EOS);
        seq.mask.push(1);
        seq
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS || id == PAD || id == BOS {
                continue;
            }
            let w = self.word(id).unwrap_or(RESERVED[UNK as usize]);
            match w.strip_prefix(GLUE) {
                Some(rest) if !rest.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(w);
                }
            }
        }
        out
    }
}
