//! Explicit finite probability tables over enumerated sequences — the
//! exact-oracle representation used throughout the crate.

use std::io::Write;

use crate::error::ModelError;
use crate::num::CompensatedSum;
use crate::sequence::Sequence;
use crate::vocab::Vocab;

const TABLE_SUM_TOL: f64 = 1e-9;

/// A probability table with support held in canonical (lexicographic)
/// order. Probabilities are nonnegative and sum to 1 within 1e-9.
#[derive(Clone, Debug, PartialEq)]
pub struct DistTable {
    entries: Vec<(Sequence, f64)>,
}

impl DistTable {
    /// Build from arbitrary entries: sorts, rejects duplicates, negatives
    /// and an off-by-more-than-tolerance total.
    pub fn from_entries(mut entries: Vec<(Sequence, f64)>) -> Result<Self, ModelError> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Self::from_lexicographic_entries(entries)
    }

    /// Build from entries already in lexicographic order (as emitted by
    /// support enumeration).
    pub fn from_lexicographic_entries(entries: Vec<(Sequence, f64)>) -> Result<Self, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::InvalidModel("empty distribution table".into()));
        }
        let mut sum = CompensatedSum::new();
        for (i, (seq, p)) in entries.iter().enumerate() {
            if !p.is_finite() || *p < 0.0 {
                return Err(ModelError::InvalidModel(format!("invalid probability {p}")));
            }
            if i > 0 {
                match entries[i - 1].0.cmp(seq) {
                    std::cmp::Ordering::Less => {}
                    std::cmp::Ordering::Equal => {
                        return Err(ModelError::InvalidModel(format!("duplicate sequence {seq:?}")));
                    }
                    std::cmp::Ordering::Greater => {
                        return Err(ModelError::InvalidModel("entries not in lexicographic order".into()));
                    }
                }
            }
            sum.add(*p);
        }
        let total = sum.value();
        if (total - 1.0).abs() > TABLE_SUM_TOL {
            return Err(ModelError::InvalidModel(format!(
                "table mass {total} differs from 1 by more than {TABLE_SUM_TOL}"
            )));
        }
        Ok(DistTable { entries })
    }

    /// Build from unnormalized nonnegative weights, dividing by their total.
    pub fn from_weights(mut entries: Vec<(Sequence, f64)>) -> Result<Self, ModelError> {
        let mut sum = CompensatedSum::new();
        for (_, w) in &entries {
            if !w.is_finite() || *w < 0.0 {
                return Err(ModelError::InvalidModel(format!("invalid weight {w}")));
            }
            sum.add(*w);
        }
        let total = sum.value();
        if total <= 0.0 {
            return Err(ModelError::InvalidModel("zero total weight".into()));
        }
        for (_, w) in entries.iter_mut() {
            *w /= total;
        }
        entries.retain(|(_, p)| *p > 0.0);
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Probability of a sequence; 0 outside the stored support.
    pub fn prob(&self, seq: &Sequence) -> f64 {
        self.get(seq).unwrap_or(0.0)
    }

    pub fn get(&self, seq: &Sequence) -> Option<f64> {
        self.entries
            .binary_search_by(|(s, _)| s.cmp(seq))
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Sequence, f64)> {
        self.entries.iter().map(|(s, p)| (s, *p))
    }

    pub fn support(&self) -> impl Iterator<Item = &Sequence> {
        self.entries.iter().map(|(s, _)| s)
    }

    /// Total mass (1 within tolerance; exposed for oracle checks).
    pub fn total(&self) -> f64 {
        let mut sum = CompensatedSum::new();
        for (_, p) in &self.entries {
            sum.add(*p);
        }
        sum.value()
    }

    /// Restrict to sequences passing `keep` and renormalize. Errors when no
    /// kept sequence has positive mass.
    pub fn restrict_renormalize(&self, mut keep: impl FnMut(&Sequence) -> bool) -> Result<DistTable, ModelError> {
        let kept: Vec<(Sequence, f64)> = self
            .entries
            .iter()
            .filter(|(s, _)| keep(s))
            .cloned()
            .collect();
        DistTable::from_weights(kept)
    }

    /// Total-variation distance to another table.
    pub fn total_variation(&self, other: &DistTable) -> f64 {
        let mut acc = CompensatedSum::new();
        for (s, p) in self.iter() {
            acc.add((p - other.prob(s)).abs());
        }
        for (s, q) in other.iter() {
            if self.get(s).is_none() {
                acc.add(q);
            }
        }
        acc.value() / 2.0
    }

    /// CSV export: `sequence,probability` with space-joined token names and
    /// 17-significant-digit probabilities, in canonical order.
    pub fn write_csv(&self, vocab: &Vocab, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "sequence,probability")?;
        for (seq, p) in self.iter() {
            writeln!(w, "{},{:.16e}", vocab.render_tokens(seq.tokens()), p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{Token, EOS};

    fn seq(toks: &[u16]) -> Sequence {
        Sequence::new(toks.iter().map(|&t| Token(t)).collect()).unwrap()
    }

    #[test]
    fn lookup_and_default() {
        let t = DistTable::from_entries(vec![(seq(&[0]), 0.25), (seq(&[1, 0]), 0.75)]).unwrap();
        assert_eq!(t.prob(&seq(&[1, 0])), 0.75);
        assert_eq!(t.prob(&seq(&[2, 0])), 0.0);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(DistTable::from_entries(vec![(seq(&[0]), 0.5)]).is_err());
        assert!(DistTable::from_entries(vec![(seq(&[0]), 0.5), (seq(&[0]), 0.5)]).is_err());
        assert!(DistTable::from_entries(vec![(seq(&[0]), 1.5), (seq(&[1, 0]), -0.5)]).is_err());
    }

    #[test]
    fn weights_normalize_and_drop_zeros() {
        let t = DistTable::from_weights(vec![
            (seq(&[0]), 2.0),
            (seq(&[1, 0]), 6.0),
            (seq(&[2, 0]), 0.0),
        ])
        .unwrap();
        assert_eq!(t.len(), 2);
        assert!((t.prob(&seq(&[0])) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn restriction_renormalizes() {
        let t = DistTable::from_entries(vec![(seq(&[0]), 0.25), (seq(&[1, 0]), 0.75)]).unwrap();
        let r = t.restrict_renormalize(|s| s.tokens()[0] == EOS).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r.prob(&seq(&[0])) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tv_distance() {
        let p = DistTable::from_entries(vec![(seq(&[0]), 0.5), (seq(&[1, 0]), 0.5)]).unwrap();
        let q = DistTable::from_entries(vec![(seq(&[0]), 0.25), (seq(&[2, 0]), 0.75)]).unwrap();
        assert!((p.total_variation(&q) - 0.75).abs() < 1e-15);
    }
}
