//! BERT-style vocabulary loading and greedy WordPiece tokenization.
//!
//! The pipeline is uncased: text is lowercased and split on whitespace and
//! ASCII punctuation before greedy longest-match-first subword segmentation.
//! Continuation pieces carry the `##` prefix in their vocabulary string.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

/// The five special tokens every vocabulary must contain.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

const CONTINUATION_PREFIX: &str = "##";

/// Ids of the special tokens inside a [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

/// An ordered WordPiece vocabulary with token<->id mapping.
///
/// Ids are dense `0..V-1` and equal the line number in the source file.
/// Immutable after load; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    special: SpecialIds,
    content_hash: String,
}

impl Vocab {
    /// Build a vocabulary from an ordered token list.
    ///
    /// Rejects duplicate tokens (format error) and token lists missing any of
    /// the five special tokens (configuration error).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Format(format!("empty token at line {i}")));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate token {tok:?} at line {i}")));
            }
        }
        let lookup = |name: &str| -> Result<u32> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("special token {name} missing from vocabulary")))
        };
        let special = SpecialIds {
            pad: lookup("[PAD]")?,
            unk: lookup("[UNK]")?,
            cls: lookup("[CLS]")?,
            sep: lookup("[SEP]")?,
            mask: lookup("[MASK]")?,
        };
        let mut hash_input = Vec::new();
        for tok in &tokens {
            hash_input.extend_from_slice(tok.as_bytes());
            hash_input.push(b'\n');
        }
        let content_hash = sha256_hex(&hash_input);
        Ok(Vocab {
            tokens,
            index,
            special,
            content_hash,
        })
    }

    /// Number of tokens `V`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    /// Token string for an id; panics on out-of-range ids.
    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Hex SHA-256 over the token list; recorded in downstream artifacts.
    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }
}

/// Load a vocabulary file: UTF-8, one token per line, line index = id.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tokens: Vec<String> = text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect();
    Vocab::from_tokens(tokens)
}

/// A fixed-length token sequence: `[CLS] piece... [SEP] [PAD]...`.
///
/// `word_index[i]` is the source-word index piece `i` came from (`None` for
/// the structural [CLS]/[SEP]/[PAD] positions). `is_special[i]` marks those
/// structural positions; [UNK] pieces are content, not special.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub word_index: Vec<Option<usize>>,
    pub is_special: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions holding caption content (non-special, non-pad), ascending.
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_special[i]).collect()
    }
}

/// Lowercase and split on whitespace and ASCII punctuation.
///
/// Punctuation characters become single-character words.
pub fn split_words(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in lowered.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match-first segmentation of one word.
///
/// Returns `None` when some remainder of the word has no vocabulary match,
/// in which case the whole word maps to a single [UNK] piece.
fn wordpiece_word(word: &str, vocab: &Vocab) -> Option<Vec<u32>> {
    if let Some(id) = vocab.id_of(word) {
        return Some(vec![id]);
    }
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut matched = None;
        while start < end {
            let sub: String = chars[start..end].iter().collect();
            let candidate = if start == 0 {
                sub
            } else {
                format!("{CONTINUATION_PREFIX}{sub}")
            };
            if let Some(id) = vocab.id_of(&candidate) {
                matched = Some(id);
                break;
            }
            end -= 1;
        }
        pieces.push(matched?);
        start = end;
    }
    Some(pieces)
}

/// Tokenize a caption into a fixed-length [`TokenSeq`].
///
/// [CLS] is prepended and [SEP] appended; pieces beyond `max_len - 2` are
/// dropped (earliest tokens kept) and the sequence is padded to `max_len`.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    if max_len < 2 {
        return Err(Error::Argument(format!(
            "max_len must be at least 2 to hold [CLS] and [SEP], got {max_len}"
        )));
    }
    let words = split_words(text);
    let special = vocab.special();

    let budget = max_len - 2;
    let mut ids = Vec::with_capacity(max_len);
    let mut word_index = Vec::with_capacity(max_len);
    ids.push(special.cls);
    word_index.push(None);

    'words: for (w, word) in words.iter().enumerate() {
        let pieces = wordpiece_word(word, vocab).unwrap_or_else(|| vec![special.unk]);
        for id in pieces {
            if ids.len() - 1 == budget {
                break 'words;
            }
            ids.push(id);
            word_index.push(Some(w));
        }
    }

    ids.push(special.sep);
    word_index.push(None);
    while ids.len() < max_len {
        ids.push(special.pad);
        word_index.push(None);
    }

    let is_special = ids
        .iter()
        .zip(&word_index)
        .map(|(_, w)| w.is_none())
        .collect();
    Ok(TokenSeq {
        ids,
        word_index,
        is_special,
    })
}

/// Map a token string to its vocabulary id, falling back to [UNK].
pub fn token_to_label(token: &str, vocab: &Vocab) -> u32 {
    vocab.id_of(token).unwrap_or(vocab.special().unk)
}
