//! Byte-level tokens and prompts.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Number of symbols in the byte vocabulary.
pub const VOCAB_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u8);

impl Token {
    pub fn id(self) -> usize {
        self.0 as usize
    }
}

/// A non-empty token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Token>", into = "Vec<Token>")]
pub struct Prompt(Vec<Token>);

impl Prompt {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(LabError::EmptyPrompt);
        }
        Ok(Self(tokens))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::new(bytes.iter().map(|b| Token(*b)).collect())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_bytes(text.as_bytes())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.0.iter().map(|t| t.id()).collect()
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.0.iter().map(|t| t.0).collect()
    }

    pub fn last(&self) -> Token {
        *self.0.last().expect("non-empty")
    }

    /// First `len` tokens; `len` must be in `1..=self.len()`.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len() {
            return Err(LabError::InvalidArgument(format!(
                "prefix length {len} outside 1..={}",
                self.len()
            )));
        }
        Ok(Self(self.0[..len].to_vec()))
    }

    pub fn concat(&self, other: &Prompt) -> Prompt {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Prompt(v)
    }

    pub fn push(&mut self, t: Token) {
        self.0.push(t);
    }

    /// Whether `needle` occurs as a contiguous run inside `self`.
    pub fn contains(&self, needle: &Prompt) -> bool {
        self.0.windows(needle.len()).any(|w| w == needle.tokens())
    }
}

impl TryFrom<Vec<Token>> for Prompt {
    type Error = LabError;

    fn try_from(v: Vec<Token>) -> Result<Self> {
        Prompt::new(v)
    }
}

impl From<Prompt> for Vec<Token> {
    fn from(p: Prompt) -> Self {
        p.0
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", String::from_utf8_lossy(&self.bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prompt_rejected() {
        assert!(matches!(Prompt::new(vec![]), Err(LabError::EmptyPrompt)));
        assert!(serde_json::from_str::<Prompt>("[]").is_err());
    }

    #[test]
    fn containment() {
        let p = Prompt::from_text("hello world").unwrap();
        assert!(p.contains(&Prompt::from_text("o w").unwrap()));
        assert!(!p.contains(&Prompt::from_text("wx").unwrap()));
        assert!(!p.contains(&Prompt::from_text("hello world!").unwrap()));
    }
}
