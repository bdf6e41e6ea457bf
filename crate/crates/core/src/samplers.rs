//! Guaranteed samplers over a proposal model.
//!
//! Every sampler here returns only constraint-satisfying sequences:
//! rejection sampling (whose output law is exactly g' ∝ a'·b), quasi-
//! rejection sampling with its β knob, independent Metropolis-Hastings, and
//! the two heuristic constrained samplers. Where the instance is
//! enumerable, each sampler has an exact-law companion so the empirical
//! stream can be checked against a closed-form table.

use serde::Serialize;

use crate::constraints::ConstraintPredicate;
use crate::dist::DistTable;
use crate::error::{ModelError, SamplerError};
use crate::model::{
    apply_token_mask, sample_sequence, sample_sequence_with_logprob, visit_support, ArModel,
    SequenceModel,
};
use crate::num::CompensatedSum;
use crate::rng::RngStream;
use crate::sequence::{contains_run, Sequence};
use crate::vocab::Token;

/// Default draw budget per requested sample.
pub const DEFAULT_DRAW_BUDGET: u64 = 10_000_000;

/// Accounting for one sampler run.
#[derive(Clone, Debug, Serialize)]
pub struct SamplerReport {
    /// Proposal samples consumed.
    pub draws: u64,
    /// Samples returned.
    pub accepts: u64,
    /// accepts / draws.
    pub ar_estimate: f64,
    /// Binomial standard error of the estimate.
    pub stderr: f64,
    /// Identifier of the random stream that produced the run.
    pub stream: String,
}

impl SamplerReport {
    fn new(draws: u64, accepts: u64, stream: String) -> Self {
        let ar = if draws == 0 { 0.0 } else { accepts as f64 / draws as f64 };
        let stderr = if draws == 0 { 0.0 } else { (ar * (1.0 - ar) / draws as f64).sqrt() };
        SamplerReport { draws, accepts, ar_estimate: ar, stderr, stream }
    }
}

/// Rejection-sample the proposal until the constraint holds. The returned
/// sequence always satisfies `b`; its law is exactly g'(y) ∝ proposal(y)·b(y).
pub fn guard_sample<M: SequenceModel + ?Sized>(
    proposal: &M,
    b: &ConstraintPredicate,
    rng: &mut RngStream,
    max_draws: u64,
) -> Result<(Sequence, SamplerReport), SamplerError> {
    if max_draws == 0 {
        return Err(SamplerError::InvalidParameter("max_draws must be positive".into()));
    }
    for draw in 1..=max_draws {
        let y = sample_sequence(proposal, rng)?;
        if b.evaluate(y.tokens()) {
            return Ok((y, SamplerReport::new(draw, 1, rng.id())));
        }
    }
    Err(SamplerError::DrawBudgetExhausted {
        report: SamplerReport::new(max_draws, 0, rng.id()),
    })
}

/// Collect `count` guaranteed samples, with `max_draws_per_sample` each.
/// The report aggregates draws across the whole batch.
pub fn guard_sample_many<M: SequenceModel + ?Sized>(
    proposal: &M,
    b: &ConstraintPredicate,
    rng: &mut RngStream,
    count: usize,
    max_draws_per_sample: u64,
) -> Result<(Vec<Sequence>, SamplerReport), SamplerError> {
    let mut out = Vec::with_capacity(count);
    let mut draws = 0u64;
    for _ in 0..count {
        match guard_sample(proposal, b, rng, max_draws_per_sample) {
            Ok((y, r)) => {
                draws += r.draws;
                out.push(y);
            }
            Err(SamplerError::DrawBudgetExhausted { report }) => {
                return Err(SamplerError::DrawBudgetExhausted {
                    report: SamplerReport::new(draws + report.draws, out.len() as u64, rng.id()),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, SamplerReport::new(draws, count as u64, rng.id())))
}

/// Monte-Carlo estimate of the acceptance rate E_{y~proposal} b(y),
/// returned with its binomial standard error.
pub fn estimate_ar<M: SequenceModel + ?Sized>(
    proposal: &M,
    b: &ConstraintPredicate,
    n_draws: u64,
    rng: &mut RngStream,
) -> Result<(f64, f64), SamplerError> {
    if n_draws == 0 {
        return Err(SamplerError::InvalidParameter("n_draws must be positive".into()));
    }
    let mut accepts = 0u64;
    for _ in 0..n_draws {
        let y = sample_sequence(proposal, rng)?;
        if b.evaluate(y.tokens()) {
            accepts += 1;
        }
    }
    let r = SamplerReport::new(n_draws, accepts, rng.id());
    Ok((r.ar_estimate, r.stderr))
}

/// Quasi-rejection sampling: draw y from the proposal and accept with
/// probability min(1, P(y)/(β·proposal(y))). P(y)=0 is never accepted, so
/// outputs satisfy the constraint the potential encodes.
pub fn qrs_sample<M: SequenceModel + ?Sized>(
    proposal: &M,
    potential: &dyn Fn(&[Token]) -> f64,
    beta: f64,
    rng: &mut RngStream,
    max_draws: u64,
) -> Result<(Sequence, SamplerReport), SamplerError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(SamplerError::InvalidParameter(format!("beta must be positive and finite, got {beta}")));
    }
    if max_draws == 0 {
        return Err(SamplerError::InvalidParameter("max_draws must be positive".into()));
    }
    for draw in 1..=max_draws {
        let (y, logp) = sample_sequence_with_logprob(proposal, rng)?;
        let pot = potential(y.tokens());
        if pot > 0.0 {
            let ratio = pot / (beta * logp.exp());
            if ratio >= 1.0 || rng.gen_f64() < ratio {
                return Ok((y, SamplerReport::new(draw, 1, rng.id())));
            }
        }
    }
    Err(SamplerError::DrawBudgetExhausted {
        report: SamplerReport::new(max_draws, 0, rng.id()),
    })
}

/// Exact QRS output law and acceptance rate: the output table is
/// proportional to min(proposal(y), P(y)/β) and the acceptance rate is its
/// unnormalized total.
pub fn qrs_exact_dist<M: SequenceModel + ?Sized>(
    proposal: &M,
    potential: &dyn Fn(&[Token]) -> f64,
    beta: f64,
    budget: usize,
) -> Result<(DistTable, f64), SamplerError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(SamplerError::InvalidParameter(format!("beta must be positive and finite, got {beta}")));
    }
    let mut weights: Vec<(Sequence, f64)> = Vec::new();
    let mut ar = CompensatedSum::new();
    visit_support(proposal, budget, &mut |tokens, p| {
        let pot = potential(tokens);
        if pot > 0.0 {
            let w = p.min(pot / beta);
            ar.add(w);
            weights.push((Sequence::new(tokens.to_vec()).expect("valid"), w));
        }
    })?;
    if weights.is_empty() {
        return Err(SamplerError::InvalidParameter(
            "no proposal-supported sequence has positive potential".into(),
        ));
    }
    let table = DistTable::from_weights(weights).map_err(SamplerError::Model)?;
    Ok((table, ar.value()))
}

/// State of an independent Metropolis-Hastings chain over the potential's
/// support. The current sequence always satisfies the constraint encoded by
/// the potential.
#[derive(Clone, Debug)]
pub struct ImhChainState {
    pub current: Sequence,
    /// Importance weight P(current)/proposal(current).
    pub weight: f64,
    /// Steps taken since initialization.
    pub steps: u64,
}

impl ImhChainState {
    /// Initialize from an accepted (potential-positive) sample.
    pub fn init<M: SequenceModel + ?Sized>(
        current: Sequence,
        proposal: &M,
        potential: &dyn Fn(&[Token]) -> f64,
    ) -> Result<Self, SamplerError> {
        let pot = potential(current.tokens());
        if pot <= 0.0 {
            return Err(SamplerError::InvalidParameter(
                "IMH chain must start from a potential-positive sequence".into(),
            ));
        }
        let logp = crate::model::sequence_logprob(proposal, &current)?;
        let prop = logp.exp();
        if prop <= 0.0 {
            return Err(SamplerError::InvalidParameter(
                "IMH chain must start inside the proposal support".into(),
            ));
        }
        Ok(ImhChainState { current, weight: pot / prop, steps: 0 })
    }
}

/// One IMH move: propose y' from the proposal, accept with probability
/// min(1, w(y')/w(y)) where w = P/proposal. Zero-potential proposals are
/// always rejected, so the chain never leaves the constraint set.
pub fn imh_step<M: SequenceModel + ?Sized>(
    state: ImhChainState,
    proposal: &M,
    potential: &dyn Fn(&[Token]) -> f64,
    rng: &mut RngStream,
) -> Result<ImhChainState, SamplerError> {
    let (cand, logp) = sample_sequence_with_logprob(proposal, rng)?;
    let pot = potential(cand.tokens());
    let steps = state.steps + 1;
    if pot > 0.0 {
        let w_new = pot / logp.exp();
        let ratio = w_new / state.weight;
        if ratio >= 1.0 || rng.gen_f64() < ratio {
            return Ok(ImhChainState { current: cand, weight: w_new, steps });
        }
    }
    Ok(ImhChainState { steps, ..state })
}

/// Exact IMH transition kernel over the enumerated state space
/// {y : proposal(y) > 0 and P(y) > 0}, kept as a dense row-stochastic
/// matrix for exact marginal computation.
pub struct ImhTransition {
    states: Vec<Sequence>,
    matrix: Vec<f64>, // row-major, states.len()^2
}

impl ImhTransition {
    pub fn build<M: SequenceModel + ?Sized>(
        proposal: &M,
        potential: &dyn Fn(&[Token]) -> f64,
        budget: usize,
    ) -> Result<Self, SamplerError> {
        let mut states: Vec<Sequence> = Vec::new();
        let mut props: Vec<f64> = Vec::new();
        let mut pots: Vec<f64> = Vec::new();
        visit_support(proposal, budget, &mut |tokens, p| {
            let pot = potential(tokens);
            if pot > 0.0 {
                states.push(Sequence::new(tokens.to_vec()).expect("valid"));
                props.push(p);
                pots.push(pot);
            }
        })?;
        if states.is_empty() {
            return Err(SamplerError::InvalidParameter(
                "no proposal-supported sequence has positive potential".into(),
            ));
        }
        let k = states.len();
        let weights: Vec<f64> = pots.iter().zip(props.iter()).map(|(p, q)| p / q).collect();
        let mut matrix = vec![0.0; k * k];
        for i in 0..k {
            let mut off_diag = CompensatedSum::new();
            for j in 0..k {
                if i == j {
                    continue;
                }
                let move_p = props[j] * (weights[j] / weights[i]).min(1.0);
                matrix[i * k + j] = move_p;
                off_diag.add(move_p);
            }
            matrix[i * k + i] = (1.0 - off_diag.value()).max(0.0);
        }
        Ok(ImhTransition { states, matrix })
    }

    pub fn states(&self) -> &[Sequence] {
        &self.states
    }

    fn index_init(&self, init: &DistTable) -> Result<Vec<f64>, SamplerError> {
        let mut v = vec![0.0; self.states.len()];
        for (seq, p) in init.iter() {
            if p <= 0.0 {
                continue;
            }
            match self.states.binary_search_by(|s| s.cmp(seq)) {
                Ok(i) => v[i] = p,
                Err(_) => {
                    return Err(SamplerError::InvalidParameter(format!(
                        "init mass on {seq:?}, outside the chain state space"
                    )))
                }
            }
        }
        Ok(v)
    }

    /// Exact marginal after `n` steps from `init`: init · T^n.
    pub fn marginal(&self, init: &DistTable, n: u64) -> Result<DistTable, SamplerError> {
        let k = self.states.len();
        let mut p = self.index_init(init)?;
        let mut next = vec![0.0; k];
        for _ in 0..n {
            for x in next.iter_mut() {
                *x = 0.0;
            }
            for i in 0..k {
                let pi = p[i];
                if pi == 0.0 {
                    continue;
                }
                let row = &self.matrix[i * k..(i + 1) * k];
                for (x, t) in next.iter_mut().zip(row.iter()) {
                    *x += pi * t;
                }
            }
            std::mem::swap(&mut p, &mut next);
        }
        let entries = self
            .states
            .iter()
            .cloned()
            .zip(p)
            .filter(|(_, q)| *q > 0.0)
            .collect();
        DistTable::from_lexicographic_entries(entries).map_err(SamplerError::Model)
    }
}

/// Exact IMH marginal after `n` steps (builds the kernel afresh; use
/// [`ImhTransition`] directly when sweeping over several `n`).
pub fn imh_exact_marginal<M: SequenceModel + ?Sized>(
    proposal: &M,
    potential: &dyn Fn(&[Token]) -> f64,
    n: u64,
    init: &DistTable,
    budget: usize,
) -> Result<DistTable, SamplerError> {
    ImhTransition::build(proposal, potential, budget)?.marginal(init, n)
}

/// Exact IMH kernel in O(states) per step instead of O(states²).
///
/// One application of the kernel is
///   p'(j) = a'(j)·S(j) + p(j)·(1 − A(j)),
/// with S(j) = Σ_{w_i ≤ w_j} p(i) + w_j·Σ_{w_i > w_j} p(i)/w_i and
/// A(j) = (1/w_j)·Σ_{w_k ≤ w_j} P(k) + Σ_{w_k > w_j} a'(k), both of which
/// are prefix sums once the states are sorted by weight. This is the same
/// matrix-vector arithmetic as the dense kernel, regrouped.
pub struct ImhKernel {
    /// States in weight-sorted order.
    states_by_weight: Vec<Sequence>,
    /// Lexicographic order of `states_by_weight` indices, for table I/O.
    lex_to_sorted: Vec<usize>,
    proposal_probs: Vec<f64>,
    weights: Vec<f64>,
    /// 1 − A(j), precomputed.
    stay_coeff: Vec<f64>,
}

impl ImhKernel {
    pub fn build<M: SequenceModel + ?Sized>(
        proposal: &M,
        potential: &dyn Fn(&[Token]) -> f64,
        budget: usize,
    ) -> Result<Self, SamplerError> {
        let mut states: Vec<(Sequence, f64, f64)> = Vec::new(); // (seq, a', w)
        visit_support(proposal, budget, &mut |tokens, p| {
            let pot = potential(tokens);
            if pot > 0.0 {
                states.push((Sequence::new(tokens.to_vec()).expect("valid"), p, pot / p));
            }
        })?;
        if states.is_empty() {
            return Err(SamplerError::InvalidParameter(
                "no proposal-supported sequence has positive potential".into(),
            ));
        }
        // Enumeration emits lexicographic order; remember it, then sort by
        // weight.
        let k = states.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| states[i].2.partial_cmp(&states[j].2).expect("finite weights"));
        let mut lex_to_sorted = vec![0usize; k];
        for (sorted_pos, &lex_pos) in order.iter().enumerate() {
            lex_to_sorted[lex_pos] = sorted_pos;
        }
        let mut states_by_weight = Vec::with_capacity(k);
        let mut proposal_probs = Vec::with_capacity(k);
        let mut weights = Vec::with_capacity(k);
        for &lex_pos in &order {
            let (s, p, w) = &states[lex_pos];
            states_by_weight.push(s.clone());
            proposal_probs.push(*p);
            weights.push(*w);
        }
        // A(j) via prefix sums of P(k) = a'(k)·w(k) below j and a'(k) above.
        let mut stay_coeff = vec![0.0; k];
        {
            // prefix_p[j] = Σ_{i ≤ j} P(i) (weight order, ties included).
            let mut prefix_p = CompensatedSum::new();
            let mut pot_below = vec![0.0; k];
            for j in 0..k {
                // Ties: states with equal weight belong in the "≤" bucket.
                prefix_p.add(proposal_probs[j] * weights[j]);
                pot_below[j] = prefix_p.value();
            }
            let mut suffix_a = CompensatedSum::new();
            let mut a_above = vec![0.0; k];
            for j in (0..k).rev() {
                a_above[j] = suffix_a.value();
                suffix_a.add(proposal_probs[j]);
            }
            // Equal weights must all land in the "≤" bucket; adjust bucket
            // edges to the last tied index.
            let mut j = 0;
            while j < k {
                let mut hi = j;
                while hi + 1 < k && weights[hi + 1] == weights[j] {
                    hi += 1;
                }
                let a = pot_below[hi] / weights[j] + a_above[hi];
                for t in j..=hi {
                    stay_coeff[t] = 1.0 - a;
                }
                j = hi + 1;
            }
        }
        Ok(ImhKernel { states_by_weight, lex_to_sorted, proposal_probs, weights, stay_coeff })
    }

    pub fn n_states(&self) -> usize {
        self.states_by_weight.len()
    }

    /// One exact kernel application on a weight-ordered probability vector.
    fn step(&self, p: &[f64], out: &mut Vec<f64>) {
        let k = p.len();
        out.clear();
        out.resize(k, 0.0);
        // Prefix sums of p and p/w in weight order, with tie grouping.
        let mut below = vec![0.0; k]; // Σ_{w_i ≤ w_j} p(i)
        let mut above_ratio = vec![0.0; k]; // Σ_{w_i > w_j} p(i)/w_i
        {
            let mut acc = CompensatedSum::new();
            let mut j = 0;
            while j < k {
                let mut hi = j;
                while hi + 1 < k && self.weights[hi + 1] == self.weights[j] {
                    hi += 1;
                }
                for t in j..=hi {
                    acc.add(p[t]);
                }
                for t in j..=hi {
                    below[t] = acc.value();
                }
                j = hi + 1;
            }
            let mut acc = CompensatedSum::new();
            let mut j = k;
            while j > 0 {
                let mut lo = j - 1;
                while lo > 0 && self.weights[lo - 1] == self.weights[j - 1] {
                    lo -= 1;
                }
                for t in lo..j {
                    above_ratio[t] = acc.value();
                }
                for t in lo..j {
                    acc.add(p[t] / self.weights[t]);
                }
                j = lo;
            }
        }
        for jdx in 0..k {
            let s = below[jdx] + self.weights[jdx] * above_ratio[jdx];
            out[jdx] = self.proposal_probs[jdx] * s + p[jdx] * self.stay_coeff[jdx];
        }
    }

    fn init_vector(&self, init: &DistTable) -> Result<Vec<f64>, SamplerError> {
        let mut lex_states: Vec<(usize, &Sequence)> = Vec::with_capacity(self.n_states());
        // Rebuild lexicographic order from the stored permutation.
        let mut by_lex: Vec<Option<usize>> = vec![None; self.n_states()];
        for (lex_pos, &sorted_pos) in self.lex_to_sorted.iter().enumerate() {
            by_lex[lex_pos] = Some(sorted_pos);
        }
        for sorted_pos in by_lex.into_iter() {
            let sp = sorted_pos.expect("permutation is total");
            lex_states.push((sp, &self.states_by_weight[sp]));
        }
        let mut v = vec![0.0; self.n_states()];
        for (seq, p) in init.iter() {
            if p <= 0.0 {
                continue;
            }
            let found = lex_states
                .binary_search_by(|(_, s)| (*s).cmp(seq))
                .map_err(|_| {
                    SamplerError::InvalidParameter(format!(
                        "init mass on {seq:?}, outside the chain state space"
                    ))
                })?;
            v[lex_states[found].0] = p;
        }
        Ok(v)
    }

    fn to_table(&self, p: &[f64]) -> Result<DistTable, SamplerError> {
        let mut entries: Vec<(Sequence, f64)> = Vec::with_capacity(p.len());
        for (lex_pos, &sorted_pos) in self.lex_to_sorted.iter().enumerate() {
            let _ = lex_pos;
            entries.push((self.states_by_weight[sorted_pos].clone(), p[sorted_pos]));
        }
        DistTable::from_lexicographic_entries(
            entries.into_iter().filter(|(_, q)| *q > 0.0).collect(),
        )
        .map_err(SamplerError::Model)
    }

    /// Exact marginal after `n` steps.
    pub fn marginal(&self, init: &DistTable, n: u64) -> Result<DistTable, SamplerError> {
        let mut p = self.init_vector(init)?;
        let mut buf = Vec::new();
        for _ in 0..n {
            self.step(&p, &mut buf);
            std::mem::swap(&mut p, &mut buf);
        }
        self.to_table(&p)
    }

    /// Exact marginals at several step counts with a single pass; `ns` must
    /// be sorted ascending.
    pub fn marginal_sweep(&self, init: &DistTable, ns: &[u64]) -> Result<Vec<DistTable>, SamplerError> {
        let mut p = self.init_vector(init)?;
        let mut buf = Vec::new();
        let mut out = Vec::with_capacity(ns.len());
        let mut done = 0u64;
        for &n in ns {
            if n < done {
                return Err(SamplerError::InvalidParameter("step counts must be ascending".into()));
            }
            for _ in done..n {
                self.step(&p, &mut buf);
                std::mem::swap(&mut p, &mut buf);
            }
            done = n;
            out.push(self.to_table(&p)?);
        }
        Ok(out)
    }
}

/// The per-step avoidance heuristic: mask the banned token and renormalize
/// at every step. Guaranteed to avoid the token; its distribution is
/// generally not g.
pub fn heuristic_avoidance_model(base: ArModel, banned: Token) -> Result<ArModel, ModelError> {
    apply_token_mask(base, &[banned])
}

fn enforce_transform(tokens: &[Token], keyword: Token, l_max: usize) -> Sequence {
    if contains_run(tokens, &[keyword]) {
        return Sequence::new(tokens.to_vec()).expect("valid input");
    }
    let content: Vec<Token> = tokens.iter().copied().filter(|t| !t.is_eos()).collect();
    let keep = content.len().min(l_max - 1);
    let mut out = content[..keep].to_vec();
    out.push(keyword);
    if out.len() < l_max {
        out.push(crate::vocab::EOS);
    }
    Sequence::new(out).expect("transform produces valid sequences")
}

/// The enforcement heuristic: sample from the base model and, when the
/// generation would terminate without the keyword, emit the keyword as the
/// final content token instead. Always satisfies contains-keyword.
pub fn heuristic_enforce_at_end<M: SequenceModel + ?Sized>(
    base: &M,
    keyword: Token,
    rng: &mut RngStream,
) -> Result<Sequence, ModelError> {
    let y = sample_sequence(base, rng)?;
    Ok(enforce_transform(y.tokens(), keyword, base.l_max()))
}

/// Exact output law of the enforcement heuristic, by pushing the base
/// support through the transform.
pub fn enforce_at_end_exact_dist<M: SequenceModel + ?Sized>(
    base: &M,
    keyword: Token,
    budget: usize,
) -> Result<DistTable, ModelError> {
    let mut acc: std::collections::BTreeMap<Sequence, f64> = std::collections::BTreeMap::new();
    let l_max = base.l_max();
    visit_support(base, budget, &mut |tokens, p| {
        let image = enforce_transform(tokens, keyword, l_max);
        *acc.entry(image).or_insert(0.0) += p;
    })?;
    DistTable::from_lexicographic_entries(acc.into_iter().collect())
}
