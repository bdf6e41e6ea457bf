//! Binary constraint predicates over sequences.
//!
//! Predicates are pure, deterministic, and cheap (polynomial in sequence
//! length). The threshold form derives a hard constraint from a bounded
//! real-valued scorer with a strict `score > tau` cut.

use std::collections::BTreeSet;

use crate::dist::DistTable;
use crate::num::CompensatedSum;
use crate::sequence::contains_run;
use crate::vocab::Token;

/// Bounded deterministic sequence scorer with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub enum Scorer {
    /// Ratio of designated positive to positive-plus-negative tokens over
    /// the final `window` content tokens (EOS excluded); 0.5 when the window
    /// holds neither kind.
    TokenRatio {
        positive: BTreeSet<Token>,
        negative: BTreeSet<Token>,
        window: usize,
    },
}

impl Scorer {
    pub fn score(&self, tokens: &[Token]) -> f64 {
        match self {
            Scorer::TokenRatio { positive, negative, window } => {
                let content: Vec<Token> = tokens.iter().copied().filter(|t| !t.is_eos()).collect();
                let lo = content.len().saturating_sub(*window);
                let mut pos = 0usize;
                let mut neg = 0usize;
                for t in &content[lo..] {
                    if positive.contains(t) {
                        pos += 1;
                    } else if negative.contains(t) {
                        neg += 1;
                    }
                }
                if pos + neg == 0 {
                    0.5
                } else {
                    pos as f64 / (pos + neg) as f64
                }
            }
        }
    }
}

/// A hard constraint `b` mapping sequences to {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintPredicate {
    /// The keyword token run occurs somewhere in the sequence.
    ContainsKeyword(Vec<Token>),
    /// The keyword token run occurs nowhere in the sequence.
    AvoidsKeyword(Vec<Token>),
    /// The sequence starts with the given tokens.
    PrefixRequired(Vec<Token>),
    /// Strict threshold on a scorer: satisfied iff `score > tau`.
    ThresholdScore { scorer: Scorer, tau: f64 },
    /// All member constraints hold.
    Conjunction(Vec<ConstraintPredicate>),
}

impl ConstraintPredicate {
    /// Evaluate on a completed sequence's token slice (including the
    /// trailing EOS when present).
    pub fn evaluate(&self, tokens: &[Token]) -> bool {
        match self {
            ConstraintPredicate::ContainsKeyword(kw) => contains_run(tokens, kw),
            ConstraintPredicate::AvoidsKeyword(kw) => !contains_run(tokens, kw),
            ConstraintPredicate::PrefixRequired(prefix) => tokens.starts_with(prefix),
            ConstraintPredicate::ThresholdScore { scorer, tau } => scorer.score(tokens) > *tau,
            ConstraintPredicate::Conjunction(parts) => parts.iter().all(|p| p.evaluate(tokens)),
        }
    }

    /// Constant-true constraint (an empty conjunction), for trivial filters.
    pub fn always() -> Self {
        ConstraintPredicate::Conjunction(Vec::new())
    }
}

/// Total mass a table puts on satisfying sequences: the exact acceptance
/// rate of rejection sampling from the table's model under `b`.
pub fn satisfying_mass(b: &ConstraintPredicate, table: &DistTable) -> f64 {
    let mut sum = CompensatedSum::new();
    for (seq, p) in table.iter() {
        if b.evaluate(seq.tokens()) {
            sum.add(p);
        }
    }
    sum.value()
}
