//! Word-level and WordPiece tokenizers with character offsets.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::pre_tokenize;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

const MAX_WORDPIECE_CHARS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    /// Whole words and punctuation, used by the tiny backend.
    Word,
    /// Greedy longest-match subwords with `##` continuations.
    WordPiece,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub text: String,
    /// Character span in the tokenized string.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    pub kind: TokenizerKind,
    pub lowercase: bool,
    pub vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.lowercase == other.lowercase && self.vocab == other.vocab
    }
}

impl Tokenizer {
    pub fn new(kind: TokenizerKind, lowercase: bool, vocab: Vec<String>) -> Result<Self> {
        let index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        if index.len() != vocab.len() {
            return Err(Error::Config("vocabulary contains duplicate entries".into()));
        }
        for special in [PAD, UNK, CLS, SEP] {
            if !index.contains_key(special) {
                return Err(Error::Config(format!("vocabulary lacks {special}")));
            }
        }
        Ok(Self {
            kind,
            lowercase,
            vocab,
            index,
        })
    }

    /// Word vocabulary over every piece appearing in `texts`.
    pub fn build_word<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for p in pre_tokenize(t) {
                words.insert(p.text.to_lowercase());
            }
        }
        let vocab: Vec<String> = [PAD, UNK, CLS, SEP]
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| ![PAD, UNK, CLS, SEP].contains(&w.as_str())))
            .collect();
        Self::new(TokenizerKind::Word, true, vocab).expect("built vocabulary is valid")
    }

    /// WordPiece tokenizer from a BERT-style `vocab.txt` (one entry per line).
    pub fn from_vocab_file(path: &Path, lowercase: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: Vec<String> = text.lines().map(|l| l.trim_end().to_string()).collect();
        Self::new(TokenizerKind::WordPiece, lowercase, vocab)
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(mut self) -> Result<Self> {
        let vocab = std::mem::take(&mut self.vocab);
        Self::new(self.kind, self.lowercase, vocab)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn special(&self, symbol: &str) -> u32 {
        self.index[symbol]
    }

    pub fn token_text(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        let unk = self.special(UNK);
        let mut out = Vec::new();
        for piece in pre_tokenize(text) {
            let word = if self.lowercase {
                piece.text.to_lowercase()
            } else {
                piece.text.clone()
            };
            match self.kind {
                TokenizerKind::Word => out.push(Token {
                    id: self.id(&word).unwrap_or(unk),
                    text: word,
                    start: piece.start,
                    end: piece.end,
                }),
                TokenizerKind::WordPiece => {
                    self.word_pieces(&word, piece.start, piece.end, &mut out);
                }
            }
        }
        out
    }

    fn word_pieces(&self, word: &str, start: usize, end: usize, out: &mut Vec<Token>) {
        let unk = self.special(UNK);
        let chars: Vec<char> = word.chars().collect();
        // lowercasing can change the char count; fall back to whole-word UNK
        if chars.len() > MAX_WORDPIECE_CHARS || chars.len() != end - start {
            out.push(Token {
                id: self.id(word).unwrap_or(unk),
                text: word.to_string(),
                start,
                end,
            });
            return;
        }
        let mut pieces = Vec::new();
        let mut s = 0;
        while s < chars.len() {
            let mut e = chars.len();
            let mut found = None;
            while e > s {
                let sub: String = chars[s..e].iter().collect();
                let candidate = if s > 0 { format!("##{sub}") } else { sub };
                if let Some(id) = self.id(&candidate) {
                    found = Some((id, candidate));
                    break;
                }
                e -= 1;
            }
            match found {
                Some((id, text)) => {
                    pieces.push(Token {
                        id,
                        text,
                        start: start + s,
                        end: start + e,
                    });
                    s = e;
                }
                None => {
                    out.push(Token {
                        id: unk,
                        text: word.to_string(),
                        start,
                        end,
                    });
                    return;
                }
            }
        }
        out.extend(pieces);
    }
}
