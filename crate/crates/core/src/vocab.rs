//! Token vocabulary with reserved special tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const BLANK: usize = 3;
pub const SOB: usize = 4;
pub const EOB: usize = 5;
/// Single token of the dummy "no-bias" phrase.
pub const NO_BIAS: usize = 6;

pub const SPECIAL_TOKENS: [&str; 7] = ["<pad>", "<sos>", "<eos>", "<blank>", "<sob>", "<eob>", "<nobias>"];

/// How text is split into tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    #[default]
    Word,
    Char,
}

impl std::str::FromStr for Tokenization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Self::Word),
            "char" => Ok(Self::Char),
            other => Err(Error::Config(format!("unknown tokenization `{other}`"))),
        }
    }
}

/// Contiguous id space: the reserved tokens first, then regular tokens in
/// insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(regular: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_TOKENS {
            v.push(s.to_string())?;
        }
        for t in regular {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?}")));
            }
            v.push(t)?;
        }
        Ok(v)
    }

    fn push(&mut self, t: String) -> Result<()> {
        if self.index.contains_key(&t) {
            return Err(Error::Config(format!("duplicate token `{t}`")));
        }
        self.index.insert(t.clone(), self.tokens.len());
        self.tokens.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    pub fn first_regular(&self) -> usize {
        SPECIAL_TOKENS.len()
    }

    pub fn regular_ids(&self) -> std::ops::Range<usize> {
        SPECIAL_TOKENS.len()..self.tokens.len()
    }

    /// CTC classes: blank plus every regular token.
    pub fn ctc_classes(&self) -> usize {
        self.tokens.len() - SPECIAL_TOKENS.len() + 1
    }

    /// CTC class of a regular token; blank maps to 0, other specials have none.
    pub fn ctc_class(&self, id: usize) -> Option<usize> {
        if id == BLANK {
            Some(0)
        } else if id >= SPECIAL_TOKENS.len() && id < self.tokens.len() {
            Some(id - SPECIAL_TOKENS.len() + 1)
        } else {
            None
        }
    }

    /// Splits `text` and resolves every token. `line` is reported in errors.
    pub fn encode(&self, text: &str, mode: Tokenization, line: usize) -> Result<Vec<usize>> {
        let lookup = |tok: &str| {
            self.id(tok).ok_or_else(|| Error::UnknownToken {
                token: tok.to_string(),
                line,
            })
        };
        match mode {
            Tokenization::Word => text.split_whitespace().map(lookup).collect(),
            Tokenization::Char => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| lookup(c.encode_utf8(&mut [0; 4])))
                .collect(),
        }
    }

    /// Joins tokens back into text (space separated in word mode).
    pub fn decode(&self, ids: &[usize], mode: Tokenization) -> String {
        let parts = ids.iter().map(|&i| self.token(i));
        match mode {
            Tokenization::Word => parts.collect::<Vec<_>>().join(" "),
            Tokenization::Char => parts.collect(),
        }
    }

    /// One token per line, reserved tokens included.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if lines.len() < SPECIAL_TOKENS.len() || lines[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(Error::Config(
                "vocabulary file must start with the reserved tokens".into(),
            ));
        }
        Self::new(lines[SPECIAL_TOKENS.len()..].iter().copied())
    }
}
