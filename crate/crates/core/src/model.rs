//! Finite autoregressive sequence models.
//!
//! A model assigns every EOS-free prefix shorter than `l_max` a next-token
//! distribution over the whole vocabulary. Sequences terminate when EOS is
//! drawn or when `l_max` tokens have been produced without it (forced
//! termination), which makes the sequence space finite and every downstream
//! quantity exactly enumerable.
//!
//! Three concrete families are provided: full-context tabular conditionals,
//! n-gram conditionals of order `k` (the previous `k-1` tokens), and
//! composed models (per-step logit bias, per-step token masking) wrapping a
//! base model. Models are immutable after construction.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::dist::DistTable;
use crate::error::ModelError;
use crate::num::CompensatedSum;
use crate::rng::RngStream;
use crate::sequence::{contains_run, Sequence};
use crate::vocab::{Token, Vocab};

/// Default cap on enumerated support sequences (and on materialized
/// contexts).
pub const DEFAULT_ENUM_BUDGET: usize = 10_000_000;

const PROB_SUM_TOL: f64 = 1e-12;

/// Read interface shared by concrete models and trainable policies.
pub trait SequenceModel {
    fn vocab(&self) -> &Vocab;

    /// Maximum sequence length in tokens, including a trailing EOS.
    fn l_max(&self) -> usize;

    /// Next-token conditional for an EOS-free prefix with `len < l_max`.
    fn next_token_dist(&self, prefix: &[Token]) -> Result<Vec<f64>, ModelError>;
}

impl<M: SequenceModel + ?Sized> SequenceModel for &M {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }
    fn l_max(&self) -> usize {
        (**self).l_max()
    }
    fn next_token_dist(&self, prefix: &[Token]) -> Result<Vec<f64>, ModelError> {
        (**self).next_token_dist(prefix)
    }
}

pub(crate) fn validate_prefix(vocab: &Vocab, l_max: usize, prefix: &[Token]) -> Result<(), ModelError> {
    if prefix.len() >= l_max {
        return Err(ModelError::InvalidPrefix(format!(
            "prefix length {} not below l_max {}",
            prefix.len(),
            l_max
        )));
    }
    for &t in prefix {
        if t.is_eos() {
            return Err(ModelError::InvalidPrefix("prefix contains EOS".into()));
        }
        if !vocab.contains(t) {
            return Err(ModelError::InvalidPrefix(format!("token id {} out of vocabulary", t.0)));
        }
    }
    Ok(())
}

fn validate_prob_vec(vocab: &Vocab, probs: &[f64]) -> Result<(), ModelError> {
    if probs.len() != vocab.len() {
        return Err(ModelError::InvalidModel(format!(
            "probability vector length {} does not match vocabulary size {}",
            probs.len(),
            vocab.len()
        )));
    }
    let mut sum = CompensatedSum::new();
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(ModelError::InvalidModel(format!("invalid probability {p}")));
        }
        sum.add(p);
    }
    if (sum.value() - 1.0).abs() > PROB_SUM_TOL {
        return Err(ModelError::InvalidModel(format!(
            "probability vector sums to {} (off by more than {PROB_SUM_TOL})",
            sum.value()
        )));
    }
    Ok(())
}

/// Rule controlling when a logit bias is applied.
#[derive(Clone, Debug, PartialEq)]
pub enum DeactivationRule {
    /// Bias applied at every step.
    Never,
    /// Bias applied only while the keyword run has not yet occurred in the
    /// prefix; once it has, conditionals equal the base model's exactly.
    AfterKeyword(Vec<Token>),
}

impl DeactivationRule {
    fn bias_active(&self, prefix: &[Token]) -> bool {
        match self {
            DeactivationRule::Never => true,
            DeactivationRule::AfterKeyword(kw) => !contains_run(prefix, kw),
        }
    }
}

#[derive(Clone, Debug)]
enum ModelKind {
    Tabular {
        table: BTreeMap<Vec<Token>, Vec<f64>>,
    },
    Ngram {
        order: usize,
        table: BTreeMap<Vec<Token>, Vec<f64>>,
    },
    LogitBias {
        base: Box<ArModel>,
        bias: Vec<f64>,
        rule: DeactivationRule,
    },
    TokenMask {
        base: Box<ArModel>,
        banned: Vec<bool>,
    },
}

/// A finite autoregressive model.
#[derive(Clone, Debug)]
pub struct ArModel {
    vocab: Vocab,
    l_max: usize,
    kind: ModelKind,
}

impl ArModel {
    /// Full-context tabular model. Keys are EOS-free prefixes; each reachable
    /// prefix shorter than `l_max` must be present when queried.
    pub fn tabular(
        vocab: Vocab,
        l_max: usize,
        table: BTreeMap<Vec<Token>, Vec<f64>>,
    ) -> Result<Self, ModelError> {
        if l_max == 0 {
            return Err(ModelError::InvalidModel("l_max must be at least 1".into()));
        }
        for (ctx, probs) in &table {
            validate_prefix(&vocab, l_max, ctx)?;
            validate_prob_vec(&vocab, probs)?;
        }
        Ok(ArModel {
            vocab,
            l_max,
            kind: ModelKind::Tabular { table },
        })
    }

    /// n-gram model of the given order: conditionals depend on the previous
    /// `order - 1` tokens (or the whole prefix when shorter).
    pub fn ngram(
        vocab: Vocab,
        l_max: usize,
        order: usize,
        table: BTreeMap<Vec<Token>, Vec<f64>>,
    ) -> Result<Self, ModelError> {
        if l_max == 0 {
            return Err(ModelError::InvalidModel("l_max must be at least 1".into()));
        }
        if order == 0 {
            return Err(ModelError::InvalidModel("n-gram order must be at least 1".into()));
        }
        for (ctx, probs) in &table {
            if ctx.len() > order - 1 {
                return Err(ModelError::InvalidModel(format!(
                    "n-gram context of length {} exceeds order {} - 1",
                    ctx.len(),
                    order
                )));
            }
            for &t in ctx {
                if t.is_eos() || !vocab.contains(t) {
                    return Err(ModelError::InvalidModel("bad n-gram context token".into()));
                }
            }
            validate_prob_vec(&vocab, probs)?;
        }
        Ok(ArModel {
            vocab,
            l_max,
            kind: ModelKind::Ngram { order, table },
        })
    }

    /// Uniform next-token distribution at every step (an order-1 n-gram).
    pub fn uniform(vocab: Vocab, l_max: usize) -> Result<Self, ModelError> {
        let n = vocab.len();
        let mut table = BTreeMap::new();
        table.insert(Vec::new(), vec![1.0 / n as f64; n]);
        ArModel::ngram(vocab, l_max, 1, table)
    }

    /// Tabular model built by walking all reachable EOS-free prefixes and
    /// asking `f` for each conditional. `budget` caps the number of contexts.
    pub fn tabular_from_fn(
        vocab: Vocab,
        l_max: usize,
        budget: usize,
        mut f: impl FnMut(&[Token]) -> Result<Vec<f64>, ModelError>,
    ) -> Result<Self, ModelError> {
        let mut table = BTreeMap::new();
        let mut stack: Vec<Vec<Token>> = vec![Vec::new()];
        while let Some(ctx) = stack.pop() {
            if table.len() >= budget {
                return Err(ModelError::EnumerationTooLarge { budget });
            }
            let probs = f(&ctx)?;
            validate_prob_vec(&vocab, &probs)?;
            if ctx.len() + 1 < l_max {
                for t in vocab.content_tokens() {
                    if probs[t.index()] > 0.0 {
                        let mut child = ctx.clone();
                        child.push(t);
                        stack.push(child);
                    }
                }
            }
            table.insert(ctx, probs);
        }
        ArModel::tabular(vocab, l_max, table)
    }

    /// Position-dependent, context-independent model: the conditional at
    /// step `t` is `dists[t]` regardless of the prefix tokens.
    pub fn per_step(vocab: Vocab, dists: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let l_max = dists.len();
        let v = vocab.clone();
        ArModel::tabular_from_fn(vocab, l_max, DEFAULT_ENUM_BUDGET, |ctx| {
            let d = dists[ctx.len()].clone();
            validate_prob_vec(&v, &d)?;
            Ok(d)
        })
    }

    /// Maximum-likelihood n-gram fit on a token corpus. Each line is a
    /// content-token sequence; a line shorter than `l_max` contributes an EOS
    /// transition at its end, a line of exactly `l_max` tokens ends by forced
    /// termination and contributes none.
    pub fn fit_ngram(
        vocab: Vocab,
        l_max: usize,
        order: usize,
        corpus: &[Vec<Token>],
    ) -> Result<Self, ModelError> {
        if order == 0 {
            return Err(ModelError::InvalidModel("n-gram order must be at least 1".into()));
        }
        if corpus.is_empty() {
            return Err(ModelError::InvalidModel("empty corpus".into()));
        }
        let ctx_len = order - 1;
        let mut counts: BTreeMap<Vec<Token>, Vec<u64>> = BTreeMap::new();
        let mut bump = |ctx: &[Token], t: Token| {
            counts
                .entry(ctx.to_vec())
                .or_insert_with(|| vec![0; vocab.len()])[t.index()] += 1;
        };
        for (li, line) in corpus.iter().enumerate() {
            if line.is_empty() || line.len() > l_max {
                return Err(ModelError::InvalidModel(format!(
                    "corpus line {} has length {}, want 1..={}",
                    li,
                    line.len(),
                    l_max
                )));
            }
            for (i, &t) in line.iter().enumerate() {
                if t.is_eos() || !vocab.contains(t) {
                    return Err(ModelError::InvalidModel(format!("corpus line {li} has a bad token")));
                }
                let lo = i.saturating_sub(ctx_len);
                bump(&line[lo..i], t);
            }
            if line.len() < l_max {
                let lo = line.len().saturating_sub(ctx_len);
                bump(&line[lo..], crate::vocab::EOS);
            }
        }
        let table = counts
            .into_iter()
            .map(|(ctx, cs)| {
                let total: u64 = cs.iter().sum();
                let probs = cs.iter().map(|&c| c as f64 / total as f64).collect();
                (ctx, probs)
            })
            .collect();
        ArModel::ngram(vocab, l_max, order, table)
    }

    /// Materialize this model (typically a composed one) as a full-context
    /// tabular model over its reachable contexts.
    pub fn materialize_tabular(&self, budget: usize) -> Result<ArModel, ModelError> {
        ArModel::tabular_from_fn(self.vocab.clone(), self.l_max, budget, |ctx| {
            self.next_token_dist(ctx)
        })
    }

    /// Exact tabular autoregressive representation of a finite sequence
    /// distribution: conditionals are the table's prefix-conditional
    /// probabilities. Every finite table over the bounded sequence space is
    /// representable this way.
    pub fn from_dist_table(
        vocab: Vocab,
        l_max: usize,
        table: &crate::dist::DistTable,
    ) -> Result<ArModel, ModelError> {
        let mut masses: BTreeMap<Vec<Token>, Vec<f64>> = BTreeMap::new();
        for (seq, p) in table.iter() {
            if p <= 0.0 {
                continue;
            }
            let tokens = seq.tokens();
            if tokens.len() > l_max || (!seq.ends_with_eos() && tokens.len() != l_max) {
                return Err(ModelError::InvalidSequence(format!(
                    "table sequence {seq:?} does not fit l_max {l_max}"
                )));
            }
            for i in 0..tokens.len() {
                masses
                    .entry(tokens[..i].to_vec())
                    .or_insert_with(|| vec![0.0; vocab.len()])[tokens[i].index()] += p;
            }
        }
        let cond = masses
            .into_iter()
            .map(|(ctx, ms)| {
                let total: f64 = ms.iter().sum();
                let mut probs: Vec<f64> = ms.iter().map(|&m| m / total).collect();
                let s: f64 = probs.iter().sum();
                for q in probs.iter_mut() {
                    *q /= s;
                }
                (ctx, probs)
            })
            .collect();
        ArModel::tabular(vocab, l_max, cond)
    }

    pub fn variant_name(&self) -> &'static str {
        match &self.kind {
            ModelKind::Tabular { .. } => "tabular",
            ModelKind::Ngram { .. } => "ngram",
            ModelKind::LogitBias { .. } | ModelKind::TokenMask { .. } => "composed",
        }
    }

    pub fn ngram_order(&self) -> Option<usize> {
        match &self.kind {
            ModelKind::Ngram { order, .. } => Some(*order),
            _ => None,
        }
    }

    /// The n-gram context window for a prefix (the whole prefix for tabular
    /// and composed models).
    fn context_of<'a>(&self, prefix: &'a [Token]) -> &'a [Token] {
        match &self.kind {
            ModelKind::Ngram { order, .. } => {
                let keep = order - 1;
                &prefix[prefix.len().saturating_sub(keep)..]
            }
            _ => prefix,
        }
    }

    /// Serialize as the line-oriented text format. Composed models are
    /// materialized to tabular form first.
    pub fn write_text(&self, w: &mut impl Write) -> Result<(), ModelError> {
        let (variant, order, table) = match &self.kind {
            ModelKind::Tabular { table } => ("tabular", None, table),
            ModelKind::Ngram { order, table } => ("ngram", Some(*order), table),
            _ => {
                let mat = self.materialize_tabular(DEFAULT_ENUM_BUDGET)?;
                mat.write_text(w)?;
                return Ok(());
            }
        };
        writeln!(w, "guardgen-model v1")?;
        writeln!(w, "vocab {}", self.vocab.names().join(" "))?;
        writeln!(w, "l_max {}", self.l_max)?;
        writeln!(w, "variant {variant}")?;
        if let Some(order) = order {
            writeln!(w, "order {order}")?;
        }
        writeln!(w, "contexts {}", table.len())?;
        for (ctx, probs) in table {
            write!(w, "ctx {} |", self.vocab.render_tokens(ctx))?;
            for p in probs {
                // 17 significant digits: round-trips f64 bit-exactly.
                write!(w, " {:.16e}", p)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn parse_text(r: &mut impl BufRead) -> Result<ArModel, ModelError> {
        let mut lines = r.lines().enumerate();
        let mut next_line = |want: &str| -> Result<(usize, String), ModelError> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(ModelError::Parse { line: i + 1, message: e.to_string() }),
                None => Err(ModelError::Parse { line: 0, message: format!("missing {want}") }),
            }
        };
        let (ln, header) = next_line("header")?;
        if header.trim() != "guardgen-model v1" {
            return Err(ModelError::Parse { line: ln, message: "bad header".into() });
        }
        let field = |line: &str, ln: usize, key: &str| -> Result<String, ModelError> {
            line.strip_prefix(key)
                .and_then(|s| s.strip_prefix(' '))
                .map(|s| s.to_string())
                .ok_or_else(|| ModelError::Parse { line: ln, message: format!("expected `{key} ...`") })
        };
        let (ln, l) = next_line("vocab")?;
        let names: Vec<String> = field(&l, ln, "vocab")?.split_whitespace().map(String::from).collect();
        let vocab = Vocab::from_names(names).map_err(|e| ModelError::Parse { line: ln, message: e.to_string() })?;
        let (ln, l) = next_line("l_max")?;
        let l_max: usize = field(&l, ln, "l_max")?
            .parse()
            .map_err(|_| ModelError::Parse { line: ln, message: "bad l_max".into() })?;
        let (ln, l) = next_line("variant")?;
        let variant = field(&l, ln, "variant")?;
        let order = if variant == "ngram" {
            let (ln, l) = next_line("order")?;
            Some(
                field(&l, ln, "order")?
                    .parse::<usize>()
                    .map_err(|_| ModelError::Parse { line: ln, message: "bad order".into() })?,
            )
        } else if variant == "tabular" {
            None
        } else {
            return Err(ModelError::Parse { line: ln, message: format!("unknown variant {variant:?}") });
        };
        let (ln, l) = next_line("contexts")?;
        let n_ctx: usize = field(&l, ln, "contexts")?
            .parse()
            .map_err(|_| ModelError::Parse { line: ln, message: "bad context count".into() })?;
        let mut table = BTreeMap::new();
        for _ in 0..n_ctx {
            let (ln, l) = next_line("ctx line")?;
            let body = field(&l, ln, "ctx")?;
            let (ctx_part, prob_part) = body
                .split_once('|')
                .ok_or_else(|| ModelError::Parse { line: ln, message: "missing `|`".into() })?;
            let ctx = vocab
                .parse_tokens(ctx_part)
                .map_err(|e| ModelError::Parse { line: ln, message: e.to_string() })?;
            let probs: Result<Vec<f64>, _> = prob_part
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| ModelError::Parse { line: ln, message: format!("bad probability {s:?}") }))
                .collect();
            table.insert(ctx, probs?);
        }
        match order {
            Some(order) => ArModel::ngram(vocab, l_max, order, table),
            None => ArModel::tabular(vocab, l_max, table),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        self.write_text(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ArModel, ModelError> {
        let data = std::fs::read(path)?;
        ArModel::parse_text(&mut data.as_slice())
    }
}

impl SequenceModel for ArModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn l_max(&self) -> usize {
        self.l_max
    }

    fn next_token_dist(&self, prefix: &[Token]) -> Result<Vec<f64>, ModelError> {
        validate_prefix(&self.vocab, self.l_max, prefix)?;
        match &self.kind {
            ModelKind::Tabular { table } => table.get(prefix).cloned().ok_or_else(|| {
                ModelError::InvalidModel(format!(
                    "missing tabular context '{}'",
                    self.vocab.render_tokens(prefix)
                ))
            }),
            ModelKind::Ngram { table, .. } => {
                let ctx = self.context_of(prefix);
                table.get(ctx).cloned().ok_or_else(|| {
                    ModelError::InvalidModel(format!(
                        "unseen n-gram context '{}'",
                        self.vocab.render_tokens(ctx)
                    ))
                })
            }
            ModelKind::LogitBias { base, bias, rule } => {
                let mut probs = base.next_token_dist(prefix)?;
                if rule.bias_active(prefix) {
                    let mut sum = 0.0;
                    for (p, &b) in probs.iter_mut().zip(bias.iter()) {
                        *p *= b.exp();
                        sum += *p;
                    }
                    for p in probs.iter_mut() {
                        *p /= sum;
                    }
                }
                Ok(probs)
            }
            ModelKind::TokenMask { base, banned } => {
                let mut probs = base.next_token_dist(prefix)?;
                let mut kept = 0.0;
                for (i, p) in probs.iter_mut().enumerate() {
                    if banned[i] {
                        *p = 0.0;
                    } else {
                        kept += *p;
                    }
                }
                if kept <= 0.0 {
                    return Err(ModelError::DeadEnd {
                        context: self.vocab.render_tokens(prefix),
                    });
                }
                for p in probs.iter_mut() {
                    *p /= kept;
                }
                Ok(probs)
            }
        }
    }
}

/// Compose a per-step logit bias onto a model: active-step logits are the
/// base logits plus `bias`, renormalized; inactive steps equal the base.
pub fn apply_logit_bias(
    model: ArModel,
    bias: &BTreeMap<Token, f64>,
    rule: DeactivationRule,
) -> Result<ArModel, ModelError> {
    let mut dense = vec![0.0; model.vocab.len()];
    for (&t, &b) in bias {
        if !model.vocab.contains(t) {
            return Err(ModelError::InvalidModel(format!("bias token id {} out of vocabulary", t.0)));
        }
        if !b.is_finite() {
            return Err(ModelError::InvalidModel(format!("non-finite bias {b}")));
        }
        dense[t.index()] = b;
    }
    if let DeactivationRule::AfterKeyword(kw) = &rule {
        for &t in kw {
            if !model.vocab.contains(t) {
                return Err(ModelError::InvalidModel("deactivation keyword token out of vocabulary".into()));
            }
        }
    }
    let (vocab, l_max) = (model.vocab.clone(), model.l_max);
    Ok(ArModel {
        vocab,
        l_max,
        kind: ModelKind::LogitBias { base: Box::new(model), bias: dense, rule },
    })
}

/// Compose a per-step token mask onto a model: banned tokens get zero
/// probability, the rest renormalized. Querying a context whose whole mass
/// is banned yields a dead-end error.
pub fn apply_token_mask(model: ArModel, banned: &[Token]) -> Result<ArModel, ModelError> {
    let mut mask = vec![false; model.vocab.len()];
    for &t in banned {
        if !model.vocab.contains(t) {
            return Err(ModelError::InvalidModel(format!("banned token id {} out of vocabulary", t.0)));
        }
        mask[t.index()] = true;
    }
    if mask.iter().all(|&b| b) {
        return Err(ModelError::InvalidModel("every token is banned".into()));
    }
    let (vocab, l_max) = (model.vocab.clone(), model.l_max);
    Ok(ArModel {
        vocab,
        l_max,
        kind: ModelKind::TokenMask { base: Box::new(model), banned: mask },
    })
}

/// Natural-log probability of a completed sequence under the model, with
/// -inf for zero-probability sequences.
pub fn sequence_logprob<M: SequenceModel + ?Sized>(model: &M, seq: &Sequence) -> Result<f64, ModelError> {
    let tokens = seq.tokens();
    if tokens.len() > model.l_max() {
        return Err(ModelError::InvalidSequence(format!(
            "length {} exceeds l_max {}",
            tokens.len(),
            model.l_max()
        )));
    }
    if !seq.ends_with_eos() && tokens.len() != model.l_max() {
        return Err(ModelError::InvalidSequence(
            "sequence lacks EOS but is shorter than l_max".into(),
        ));
    }
    for &t in tokens {
        if !model.vocab().contains(t) {
            return Err(ModelError::InvalidSequence(format!("token id {} out of vocabulary", t.0)));
        }
    }
    let mut logp = 0.0;
    for i in 0..tokens.len() {
        let dist = model.next_token_dist(&tokens[..i])?;
        let p = dist[tokens[i].index()];
        if p <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        logp += p.ln();
    }
    Ok(logp)
}

/// Linear-space probability of a completed sequence.
pub fn sequence_prob<M: SequenceModel + ?Sized>(model: &M, seq: &Sequence) -> Result<f64, ModelError> {
    Ok(sequence_logprob(model, seq)?.exp())
}

/// Ancestral sample together with its log-probability.
pub fn sample_sequence_with_logprob<M: SequenceModel + ?Sized>(
    model: &M,
    rng: &mut RngStream,
) -> Result<(Sequence, f64), ModelError> {
    let mut tokens = Vec::with_capacity(model.l_max());
    let mut logp = 0.0;
    for _ in 0..model.l_max() {
        let dist = model.next_token_dist(&tokens)?;
        let idx = rng.choose_weighted(&dist);
        logp += dist[idx].ln();
        let t = Token(idx as u16);
        tokens.push(t);
        if t.is_eos() {
            break;
        }
    }
    Ok((Sequence::new(tokens).expect("ancestral construction is valid"), logp))
}

/// Ancestral sample: EOS terminates, `l_max` tokens force termination.
pub fn sample_sequence<M: SequenceModel + ?Sized>(
    model: &M,
    rng: &mut RngStream,
) -> Result<Sequence, ModelError> {
    sample_sequence_with_logprob(model, rng).map(|(s, _)| s)
}

/// Depth-first walk of the model's support, in lexicographic sequence order.
/// `visit` receives each completed sequence's token slice and probability.
/// Returns the number of support sequences visited.
pub fn visit_support<M: SequenceModel + ?Sized>(
    model: &M,
    budget: usize,
    visit: &mut dyn FnMut(&[Token], f64),
) -> Result<usize, ModelError> {
    let l_max = model.l_max();
    let mut buf: Vec<Token> = Vec::with_capacity(l_max);
    let mut count = 0usize;

    fn rec<M: SequenceModel + ?Sized>(
        model: &M,
        l_max: usize,
        budget: usize,
        buf: &mut Vec<Token>,
        prob: f64,
        count: &mut usize,
        visit: &mut dyn FnMut(&[Token], f64),
    ) -> Result<(), ModelError> {
        let dist = model.next_token_dist(buf)?;
        let depth = buf.len();
        for (i, &p) in dist.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let t = Token(i as u16);
            let child_prob = prob * p;
            if t.is_eos() || depth + 1 == l_max {
                if *count >= budget {
                    return Err(ModelError::EnumerationTooLarge { budget });
                }
                buf.push(t);
                visit(buf, child_prob);
                buf.pop();
                *count += 1;
            } else {
                buf.push(t);
                rec(model, l_max, budget, buf, child_prob, count, visit)?;
                buf.pop();
            }
        }
        Ok(())
    }

    rec(model, l_max, budget, &mut buf, 1.0, &mut count, visit)?;
    Ok(count)
}

/// Exact table of every positive-probability sequence.
pub fn enumerate_support<M: SequenceModel + ?Sized>(
    model: &M,
    budget: usize,
) -> Result<DistTable, ModelError> {
    let mut entries = Vec::new();
    visit_support(model, budget, &mut |tokens, p| {
        entries.push((Sequence::new(tokens.to_vec()).expect("enumeration emits valid sequences"), p));
    })?;
    DistTable::from_lexicographic_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::EOS;

    fn v3() -> Vocab {
        Vocab::new(&["a", "b"]).unwrap()
    }

    /// Two-position model over {a, b}: P(a) = 0.7 at each of two steps, no
    /// early EOS. Used by several hand oracles.
    fn two_position_ab() -> ArModel {
        let vocab = v3();
        ArModel::per_step(
            vocab,
            vec![vec![0.0, 0.7, 0.3], vec![0.0, 0.7, 0.3]],
        )
        .unwrap()
    }

    #[test]
    fn uniform_first_step() {
        let m = ArModel::uniform(v3(), 4).unwrap();
        let d = m.next_token_dist(&[]).unwrap();
        assert_eq!(d, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn all_mass_on_eos() {
        let mut table = BTreeMap::new();
        table.insert(vec![], vec![1.0, 0.0, 0.0]);
        let m = ArModel::ngram(v3(), 4, 1, table).unwrap();
        assert_eq!(m.next_token_dist(&[]).unwrap(), vec![1.0, 0.0, 0.0]);
        let support = enumerate_support(&m, 100).unwrap();
        assert_eq!(support.len(), 1);
        assert!((support.prob(&Sequence::new(vec![EOS]).unwrap()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn prefix_validation() {
        let m = ArModel::uniform(v3(), 2).unwrap();
        assert!(matches!(
            m.next_token_dist(&[Token(1), Token(1)]),
            Err(ModelError::InvalidPrefix(_))
        ));
        assert!(matches!(
            m.next_token_dist(&[EOS]),
            Err(ModelError::InvalidPrefix(_))
        ));
    }

    #[test]
    fn ngram_mle_matches_hand_counts() {
        // Corpus over {a, b}, order 2 (previous token only):
        //   a b a     -> ctx a: {b:1, eos:1 (line end at len<l_max? len 3 = l_max 4 -> no, 3 < 4 so EOS after "a b a")}
        //   a a b     -> transitions: ""->a, a->a, a->b, then EOS after b
        //   b a       -> ""->b, b->a, EOS after a
        let vocab = v3();
        let a = Token(1);
        let b = Token(2);
        let corpus = vec![vec![a, b, a], vec![a, a, b], vec![b, a]];
        let m = ArModel::fit_ngram(vocab, 4, 2, &corpus).unwrap();
        // Context "a": successors b (line1 pos1->b? no: a->b in line1, a->a and a->b in line2), EOS twice
        // Hand counts for ctx [a]: line1: a->b (pos0->1), b->a handled under ctx b; final a -> EOS.
        //   line2: a->a, a->b; line3: a -> EOS.
        // counts: a:1, b:2, eos:2, total 5.
        let d = m.next_token_dist(&[a]).unwrap();
        assert!((d[a.index()] - 1.0 / 5.0).abs() < 1e-15);
        assert!((d[b.index()] - 2.0 / 5.0).abs() < 1e-15);
        assert!((d[EOS.index()] - 2.0 / 5.0).abs() < 1e-15);
        // An order-2 model keys on the last token only: prefix "a b" == prefix "b".
        let d_ab = m.next_token_dist(&[a, b]).unwrap();
        let d_b = m.next_token_dist(&[b]).unwrap();
        assert_eq!(d_ab, d_b);
    }

    #[test]
    fn enumeration_hand_oracle() {
        // |V|=2 content {a}, l_max=2, P(a|.)=0.7: {[eos]:0.3, [a,eos]:0.21, [a,a]:0.49}
        let vocab = Vocab::new(&["a"]).unwrap();
        let mut table = BTreeMap::new();
        table.insert(vec![], vec![0.3, 0.7]);
        let m = ArModel::ngram(vocab, 2, 1, table).unwrap();
        let t = enumerate_support(&m, 100).unwrap();
        let a = Token(1);
        assert_eq!(t.len(), 3);
        assert!((t.prob(&Sequence::new(vec![EOS]).unwrap()) - 0.3).abs() < 1e-15);
        assert!((t.prob(&Sequence::new(vec![a, EOS]).unwrap()) - 0.7 * 0.3).abs() < 1e-15);
        assert!((t.prob(&Sequence::new(vec![a, a]).unwrap()) - 0.7 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn enumeration_budget_error() {
        let m = ArModel::uniform(v3(), 6).unwrap();
        assert!(matches!(
            enumerate_support(&m, 10),
            Err(ModelError::EnumerationTooLarge { budget: 10 })
        ));
    }

    #[test]
    fn logprob_chain_rule_against_enumeration() {
        let m = two_position_ab();
        let table = enumerate_support(&m, 100).unwrap();
        for (seq, p) in table.iter() {
            let lp = sequence_logprob(&m, seq).unwrap();
            assert!((lp.exp() - p).abs() / p < 1e-12, "{:?}", seq);
        }
    }

    #[test]
    fn logprob_of_forbidden_first_token_is_neg_inf() {
        let vocab = v3();
        let m = ArModel::per_step(vocab, vec![vec![0.0, 1.0, 0.0], vec![0.5, 0.25, 0.25]]).unwrap();
        let s = Sequence::new(vec![Token(2), EOS]).unwrap();
        assert_eq!(sequence_logprob(&m, &s).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn logprob_single_eos() {
        let mut table = BTreeMap::new();
        table.insert(vec![], vec![0.2, 0.5, 0.3]);
        table.insert(vec![Token(1)], vec![0.4, 0.3, 0.3]);
        table.insert(vec![Token(2)], vec![0.4, 0.3, 0.3]);
        let m = ArModel::ngram(v3(), 4, 2, table).unwrap();
        let s = Sequence::new(vec![EOS]).unwrap();
        assert!((sequence_logprob(&m, &s).unwrap() - 0.2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let m = ArModel::uniform(v3(), 5).unwrap();
        let mut r1 = RngStream::derive(9, "s");
        let mut r2 = RngStream::derive(9, "s");
        for _ in 0..50 {
            assert_eq!(sample_sequence(&m, &mut r1).unwrap(), sample_sequence(&m, &mut r2).unwrap());
        }
    }

    #[test]
    fn deterministic_model_yields_unique_sequence() {
        let vocab = v3();
        let m = ArModel::per_step(vocab, vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let mut rng = RngStream::from_seed(3);
        let s = sample_sequence(&m, &mut rng).unwrap();
        assert_eq!(s.tokens(), &[Token(1), EOS]);
    }

    #[test]
    fn zero_bias_is_identity() {
        let m = two_position_ab();
        let biased = apply_logit_bias(m.clone(), &BTreeMap::new(), DeactivationRule::Never).unwrap();
        for prefix in [vec![], vec![Token(1)]] {
            let p0 = m.next_token_dist(&prefix).unwrap();
            let p1 = biased.next_token_dist(&prefix).unwrap();
            for (a, b) in p0.iter().zip(p1.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn large_bias_dominates_near_uniform_base() {
        let m = ArModel::uniform(v3(), 4).unwrap();
        let mut bias = BTreeMap::new();
        bias.insert(Token(1), 20.0);
        let biased = apply_logit_bias(m, &bias, DeactivationRule::Never).unwrap();
        let d = biased.next_token_dist(&[]).unwrap();
        assert!(d[1] >= 0.99);
        let mut inf = BTreeMap::new();
        inf.insert(Token(1), f64::INFINITY);
        assert!(apply_logit_bias(ArModel::uniform(v3(), 4).unwrap(), &inf, DeactivationRule::Never).is_err());
    }

    #[test]
    fn bias_deactivates_after_keyword() {
        let m = two_position_ab();
        let mut bias = BTreeMap::new();
        bias.insert(Token(2), 5.0);
        let biased = apply_logit_bias(
            m.clone(),
            &bias,
            DeactivationRule::AfterKeyword(vec![Token(2)]),
        )
        .unwrap();
        // Before the keyword occurs the distribution is biased.
        let before = biased.next_token_dist(&[]).unwrap();
        assert!(before[2] > 0.3);
        // After it occurs the conditional equals the base exactly.
        let after = biased.next_token_dist(&[Token(2)]).unwrap();
        assert_eq!(after, m.next_token_dist(&[Token(2)]).unwrap());
    }

    #[test]
    fn mask_of_zero_prob_token_is_identity() {
        let vocab = v3();
        let m = ArModel::per_step(vocab, vec![vec![0.0, 1.0, 0.0], vec![0.5, 0.5, 0.0]]).unwrap();
        let masked = apply_token_mask(m.clone(), &[Token(2)]).unwrap();
        for prefix in [vec![], vec![Token(1)]] {
            assert_eq!(m.next_token_dist(&prefix).unwrap(), masked.next_token_dist(&prefix).unwrap());
        }
    }

    #[test]
    fn masking_eos_forces_full_length() {
        let m = ArModel::uniform(v3(), 4).unwrap();
        let masked = apply_token_mask(m, &[EOS]).unwrap();
        let table = enumerate_support(&masked, 1000).unwrap();
        for (seq, _) in table.iter() {
            assert_eq!(seq.len(), 4);
            assert!(!seq.ends_with_eos());
        }
        assert_eq!(table.len(), 16);
    }

    #[test]
    fn dead_end_is_an_error() {
        let vocab = v3();
        // After "a", all mass is on b; banning b is a dead end there.
        let m = ArModel::per_step(vocab, vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let masked = apply_token_mask(m, &[Token(2)]).unwrap();
        assert!(matches!(
            masked.next_token_dist(&[Token(1)]),
            Err(ModelError::DeadEnd { .. })
        ));
    }

    #[test]
    fn text_roundtrip_is_bit_exact() {
        let a = Token(1);
        let corpus = vec![vec![a, Token(2), a], vec![a, a], vec![Token(2)]];
        let m = ArModel::fit_ngram(v3(), 4, 2, &corpus).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let m2 = ArModel::parse_text(&mut buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        m2.write_text(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        // And the parsed model matches distribution-for-distribution.
        for prefix in [vec![], vec![a], vec![Token(2)], vec![a, Token(2)]] {
            assert_eq!(
                m.next_token_dist(&prefix).unwrap(),
                m2.next_token_dist(&prefix).unwrap()
            );
        }
    }

    #[test]
    fn composed_serialization_materializes() {
        let m = two_position_ab();
        let mut bias = BTreeMap::new();
        bias.insert(Token(2), 1.5);
        let biased = apply_logit_bias(m, &bias, DeactivationRule::Never).unwrap();
        let mut buf = Vec::new();
        biased.write_text(&mut buf).unwrap();
        let m2 = ArModel::parse_text(&mut buf.as_slice()).unwrap();
        assert_eq!(m2.variant_name(), "tabular");
        for prefix in [vec![], vec![Token(1)], vec![Token(2)]] {
            let p0 = biased.next_token_dist(&prefix).unwrap();
            let p1 = m2.next_token_dist(&prefix).unwrap();
            for (x, y) in p0.iter().zip(p1.iter()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
