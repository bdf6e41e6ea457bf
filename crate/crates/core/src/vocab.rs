//! Tokens and vocabularies.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Index into a [`Vocab`]. Id 0 is always the end-of-sequence marker.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(pub u16);

/// The reserved end-of-sequence token.
pub const EOS: Token = Token(0);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_eos(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Finite token inventory with an id↔string mapping. EOS is always present
/// at id 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    names: Vec<String>,
}

pub const EOS_NAME: &str = "<eos>";

impl Vocab {
    /// Vocabulary of the given content token names; EOS is prepended at id 0.
    pub fn new(content: &[&str]) -> Result<Self, ModelError> {
        let mut names = Vec::with_capacity(content.len() + 1);
        names.push(EOS_NAME.to_string());
        names.extend(content.iter().map(|s| s.to_string()));
        Self::from_names(names)
    }

    /// Vocabulary from a full name list whose first entry is the EOS marker.
    pub fn from_names(names: Vec<String>) -> Result<Self, ModelError> {
        if names.is_empty() {
            return Err(ModelError::InvalidModel("vocabulary is empty".into()));
        }
        if names.len() > u16::MAX as usize {
            return Err(ModelError::InvalidModel("vocabulary too large".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(|c| c.is_whitespace() || c == '|' || c == ',') {
                return Err(ModelError::InvalidModel(format!(
                    "token name {i:?} = {n:?} is empty or contains whitespace/'|'/','"
                )));
            }
            if names[..i].contains(n) {
                return Err(ModelError::InvalidModel(format!("duplicate token name {n:?}")));
            }
        }
        Ok(Vocab { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false // EOS is always present
    }

    /// Number of non-EOS tokens.
    pub fn content_len(&self) -> usize {
        self.names.len() - 1
    }

    pub fn contains(&self, token: Token) -> bool {
        token.index() < self.names.len()
    }

    pub fn name(&self, token: Token) -> &str {
        &self.names[token.index()]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn token(&self, name: &str) -> Option<Token> {
        self.names.iter().position(|n| n == name).map(|i| Token(i as u16))
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.names.len()).map(|i| Token(i as u16))
    }

    /// Non-EOS tokens.
    pub fn content_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (1..self.names.len()).map(|i| Token(i as u16))
    }

    /// Parse a whitespace-separated token-name string.
    pub fn parse_tokens(&self, s: &str) -> Result<Vec<Token>, ModelError> {
        s.split_whitespace()
            .map(|w| {
                self.token(w)
                    .ok_or_else(|| ModelError::InvalidModel(format!("unknown token {w:?}")))
            })
            .collect()
    }

    /// Space-joined token names.
    pub fn render_tokens(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.name(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
