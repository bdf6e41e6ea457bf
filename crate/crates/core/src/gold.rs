//! The filtered model `g ∝ a·b`: exact partition function, exact gold
//! table, divergences, and the Pythagorean identity for I-projections.

use crate::constraints::ConstraintPredicate;
use crate::dist::DistTable;
use crate::error::{GoldError, ModelError};
use crate::model::{sequence_logprob, visit_support, SequenceModel};
use crate::num::{kl_term, CompensatedSum};
use crate::sequence::Sequence;

/// A base model paired with a constraint, with the partition function and
/// the exact gold table cached eagerly at construction.
#[derive(Clone, Debug)]
pub struct FilteredModel<M: SequenceModel> {
    base: M,
    predicate: ConstraintPredicate,
    z: f64,
    gold: DistTable,
    kl_gold_base: f64,
}

impl<M: SequenceModel> FilteredModel<M> {
    /// Enumerates the base support once, keeping satisfying sequences.
    /// Errors when no satisfying sequence has positive base mass (Z = 0) or
    /// when the support exceeds `budget`.
    pub fn new(base: M, predicate: ConstraintPredicate, budget: usize) -> Result<Self, GoldError> {
        let mut weights: Vec<(Sequence, f64)> = Vec::new();
        let mut z = CompensatedSum::new();
        visit_support(&base, budget, &mut |tokens, p| {
            if predicate.evaluate(tokens) {
                weights.push((Sequence::new(tokens.to_vec()).expect("enumeration emits valid sequences"), p));
                z.add(p);
            }
        })?;
        let z = z.value();
        if weights.is_empty() || z <= 0.0 {
            return Err(GoldError::EmptyGoldSupport);
        }
        let mut kl = CompensatedSum::new();
        let entries: Vec<(Sequence, f64)> = weights
            .into_iter()
            .map(|(s, p)| {
                let g = p / z;
                kl.add(g * (g.ln() - p.ln()));
                (s, g)
            })
            .collect();
        let gold = DistTable::from_lexicographic_entries(entries).map_err(GoldError::Model)?;
        Ok(FilteredModel {
            base,
            predicate,
            z,
            gold,
            kl_gold_base: kl.value(),
        })
    }

    pub fn base(&self) -> &M {
        &self.base
    }

    pub fn predicate(&self) -> &ConstraintPredicate {
        &self.predicate
    }

    /// Exact partition function Z = sum of base mass on satisfying
    /// sequences; equals the exact acceptance rate of rejection sampling
    /// from the base.
    pub fn exact_partition(&self) -> f64 {
        self.z
    }

    /// The exact gold table g(y) = base(y)·b(y)/Z.
    pub fn exact_gold(&self) -> &DistTable {
        &self.gold
    }

    /// KL(g‖base), computed as a direct sum at construction (not via the
    /// −log Z identity, which tests check against it).
    pub fn kl_gold_base(&self) -> f64 {
        self.kl_gold_base
    }

    /// Unnormalized potential P(y) = base(y)·b(y). Never consults Z, so it
    /// is usable by sampler code paths that must treat Z as unknown.
    pub fn potential(&self, seq: &Sequence) -> Result<f64, ModelError> {
        if !self.predicate.evaluate(seq.tokens()) {
            return Ok(0.0);
        }
        Ok(sequence_logprob(&self.base, seq)?.exp())
    }

    /// `|KL(p‖a) − KL(p‖g) − KL(g‖a)|` for a distribution p inside the
    /// constraint set. Errors when p puts mass on constraint-violating or
    /// base-unsupported sequences.
    pub fn pythagorean_residual(&self, p: &DistTable) -> Result<f64, GoldError> {
        for (seq, mass) in p.iter() {
            if mass <= 0.0 {
                continue;
            }
            if !self.predicate.evaluate(seq.tokens()) {
                return Err(GoldError::ConstraintViolatingInput(format!(
                    "{seq:?} violates the constraint"
                )));
            }
            if self.gold.get(seq).is_none() {
                return Err(GoldError::ConstraintViolatingInput(format!(
                    "{seq:?} lies outside the base support"
                )));
            }
        }
        let kl_p_a = exact_kl_vs_model(p, &self.base)?;
        let kl_p_g = exact_kl(p, &self.gold);
        Ok((kl_p_a - kl_p_g - self.kl_gold_base).abs())
    }
}

/// Exact partition function without materializing the gold table.
pub fn exact_partition<M: SequenceModel + ?Sized>(
    base: &M,
    predicate: &ConstraintPredicate,
    budget: usize,
) -> Result<f64, GoldError> {
    let mut z = CompensatedSum::new();
    let mut any = false;
    visit_support(base, budget, &mut |tokens, p| {
        if predicate.evaluate(tokens) {
            z.add(p);
            any = true;
        }
    })?;
    let z = z.value();
    if !any || z <= 0.0 {
        return Err(GoldError::EmptyGoldSupport);
    }
    Ok(z)
}

/// KL(p‖q) between two tables, in nats, with 0·log 0 = 0 and a +inf
/// sentinel when p escapes q's support.
pub fn exact_kl(p: &DistTable, q: &DistTable) -> f64 {
    let mut sum = CompensatedSum::new();
    for (seq, pp) in p.iter() {
        if pp <= 0.0 {
            continue;
        }
        let qq = q.prob(seq);
        let term = kl_term(pp, pp.ln(), qq, if qq > 0.0 { qq.ln() } else { f64::NEG_INFINITY });
        if term.is_infinite() {
            return f64::INFINITY;
        }
        sum.add(term);
    }
    sum.value()
}

/// KL(p‖model) where the right side is evaluated by sequence log-probability.
/// Sequences invalid for the model (e.g. longer than its cap) count as zero
/// probability, producing the +inf sentinel.
pub fn exact_kl_vs_model<M: SequenceModel + ?Sized>(
    p: &DistTable,
    model: &M,
) -> Result<f64, ModelError> {
    let mut sum = CompensatedSum::new();
    for (seq, pp) in p.iter() {
        if pp <= 0.0 {
            continue;
        }
        let ln_q = match sequence_logprob(model, seq) {
            Ok(lq) => lq,
            Err(ModelError::InvalidSequence(_)) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        if ln_q == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        sum.add(pp * (pp.ln() - ln_q));
    }
    Ok(sum.value())
}
