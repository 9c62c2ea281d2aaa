//! Transcript normalization and the CTC vocabulary.
//!
//! Normalized text is lowercase, free of punctuation, and uses `|` in place
//! of (collapsed, trimmed) whitespace.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

pub const BLANK_TOKEN: &str = "<blank>";
pub const PIPE: char = '|';
pub const BLANK_ID: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextError {
    #[error("characters outside the alphabet: {0:?}")]
    OutOfAlphabet(Vec<char>),
    #[error("unknown character {ch:?} at position {pos}")]
    UnknownChar { ch: char, pos: usize },
    #[error("id {id} at position {pos} is the CTC blank")]
    BlankId { pos: usize, id: usize },
    #[error("id {id} at position {pos} is outside the vocabulary (size {size})")]
    IdOutOfRange { pos: usize, id: usize, size: usize },
    #[error("vocabulary file: {0}")]
    VocabFile(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

/// Ordered symbol table. Id 0 is the CTC blank; the pipe appears exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    ids: HashMap<char, usize>,
}

impl Vocab {
    /// Blank, then `alphabet` in order, then the pipe.
    pub fn new(alphabet: &[char]) -> Result<Self, TextError> {
        let mut symbols = Vec::with_capacity(alphabet.len() + 1);
        symbols.extend_from_slice(alphabet);
        symbols.push(PIPE);
        Self::from_symbols(symbols)
    }

    /// `symbols` excludes the blank.
    fn from_symbols(symbols: Vec<char>) -> Result<Self, TextError> {
        let mut ids = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if ids.insert(c, i + 1).is_some() {
                return Err(TextError::InvalidVocab(format!("symbol {c:?} repeated")));
            }
        }
        if !ids.contains_key(&PIPE) {
            return Err(TextError::InvalidVocab("missing pipe symbol".into()));
        }
        Ok(Self { symbols, ids })
    }

    /// Letters `a`.. for the synthetic tone corpus.
    pub fn synthetic(letters: usize) -> Self {
        let alphabet: Vec<char> = (b'a'..).take(letters).map(char::from).collect();
        Self::new(&alphabet).expect("distinct letters")
    }

    pub fn english() -> Self {
        Self::synthetic(26)
    }

    /// Total size including the blank.
    pub fn len(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(1).and_then(|i| self.symbols.get(i)).copied()
    }

    pub fn pipe_id(&self) -> usize {
        self.ids[&PIPE]
    }

    /// Non-blank symbols in id order.
    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Alphabet characters (every symbol except the pipe).
    pub fn letters(&self) -> impl Iterator<Item = char> + '_ {
        self.symbols.iter().copied().filter(|&c| c != PIPE)
    }

    pub fn contains(&self, c: char) -> bool {
        self.ids.contains_key(&c)
    }

    pub fn encode(&self, normalized: &str) -> Result<Vec<usize>, TextError> {
        normalized
            .chars()
            .enumerate()
            .map(|(pos, ch)| self.id(ch).ok_or(TextError::UnknownChar { ch, pos }))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, TextError> {
        ids.iter()
            .enumerate()
            .map(|(pos, &id)| {
                if id == BLANK_ID {
                    Err(TextError::BlankId { pos, id })
                } else {
                    self.symbol(id).ok_or(TextError::IdOutOfRange {
                        pos,
                        id,
                        size: self.len(),
                    })
                }
            })
            .collect()
    }

    /// One symbol per line, first line `<blank>`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from(BLANK_TOKEN);
        out.push('\n');
        for c in &self.symbols {
            out.push(*c);
            out.push('\n');
        }
        out
    }

    pub fn parse_file(text: &str) -> Result<Self, TextError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(BLANK_TOKEN) => {}
            other => {
                return Err(TextError::VocabFile(format!(
                    "line 1 must be {BLANK_TOKEN}, found {other:?}"
                )))
            }
        }
        let mut symbols = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => symbols.push(c),
                _ => {
                    return Err(TextError::VocabFile(format!(
                        "line {}: expected a single symbol, found {line:?}",
                        i + 2
                    )))
                }
            }
        }
        Self::from_symbols(symbols)
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TextError::VocabFile(format!("{}: {e}", path.display())))?;
        Self::parse_file(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        std::fs::write(path, self.to_file_string())
            .map_err(|e| TextError::VocabFile(format!("{}: {e}", path.display())))
    }
}

impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{BLANK_TOKEN}")?;
        for c in &self.symbols {
            write!(f, ",{c}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Out-of-alphabet characters are an error.
    #[default]
    Strict,
    /// Out-of-alphabet characters are dropped.
    Lenient,
}

/// Lowercases, strips punctuation, and joins words with pipes.
///
/// Punctuation is anything that is not a letter, digit or whitespace.
/// An existing pipe counts as whitespace so the result is idempotent.
pub fn normalize_transcript(raw: &str, vocab: &Vocab, mode: Mode) -> Result<String, TextError> {
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut offending: Vec<char> = Vec::new();

    for ch in raw.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() || ch == PIPE {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            if vocab.contains(ch) {
                current.push(ch);
            } else if mode == Mode::Strict && !offending.contains(&ch) {
                offending.push(ch);
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    if !offending.is_empty() {
        return Err(TextError::OutOfAlphabet(offending));
    }
    Ok(words.join("|"))
}
