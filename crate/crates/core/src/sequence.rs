//! Completed output sequences.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::vocab::Token;

/// A completed output: a nonempty token list in which EOS may appear only as
/// the final token. A sequence without a trailing EOS is one that ran to the
/// model's length cap (forced termination); whether its length actually
/// matches a given cap is checked by the model operations that receive it.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sequence(Vec<Token>);

impl Sequence {
    pub fn new(tokens: Vec<Token>) -> Result<Self, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::InvalidSequence("empty token list".into()));
        }
        let last = tokens.len() - 1;
        if tokens[..last].iter().any(|t| t.is_eos()) {
            return Err(ModelError::InvalidSequence(
                "EOS before the final position".into(),
            ));
        }
        Ok(Sequence(tokens))
    }

    /// All tokens, including the trailing EOS when present.
    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[Token] {
        if self.ends_with_eos() {
            &self.0[..self.0.len() - 1]
        } else {
            &self.0
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty token lists
    }

    pub fn content_len(&self) -> usize {
        self.content().len()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.0.last().is_some_and(|t| t.is_eos())
    }
}

impl std::fmt::Debug for Sequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{:?}", t)?;
        }
        write!(f, "]")
    }
}

/// True when `run` occurs as a contiguous subsequence of `tokens`.
pub fn contains_run(tokens: &[Token], run: &[Token]) -> bool {
    if run.is_empty() {
        return true;
    }
    if run.len() > tokens.len() {
        return false;
    }
    tokens.windows(run.len()).any(|w| w == run)
}
