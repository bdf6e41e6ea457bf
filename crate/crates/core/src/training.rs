//! Proposal training: producing autoregressive approximations of the gold
//! distribution by minimizing KL(g‖π).
//!
//! Four routes are provided. The logit-bias CAP analog modifies the base
//! model without training. SFT fits the policy by cross-entropy on filtered
//! base samples. DPG performs adaptive importance-weighted gradient ascent
//! with a moving-average partition-function estimate, and warm-start DPG
//! seeds the DPG proposal from a CAP-sample fit to skip the low-acceptance
//! early phase.
//!
//! Policies are softmax-parameterized per-context logit tables, stored
//! sparsely: untouched contexts fall back to (floored) base-model logits,
//! so a fresh policy behaves like its base model.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use crate::constraints::ConstraintPredicate;
use crate::error::{ModelError, TrainError};
use crate::model::{
    apply_logit_bias, sample_sequence_with_logprob, sequence_logprob, validate_prefix, ArModel,
    DeactivationRule, SequenceModel, DEFAULT_ENUM_BUDGET,
};
use crate::num::CompensatedSum;
use crate::rng::RngStream;
use crate::sequence::Sequence;
use crate::vocab::{Token, Vocab};

/// Floor for logits derived from zero base probabilities; keeps every
/// policy softmax strictly positive while leaving KL sums unaffected at
/// working precision.
const LOGIT_FLOOR: f64 = -40.0;

/// Trainable policy family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyFamily {
    /// One logit vector per full prefix; can represent any desk-scale
    /// distribution exactly.
    TabularFullContext,
    /// One logit vector per (up to) `order - 1` trailing tokens; the
    /// misspecified regime when the target needs longer memory.
    Ngram { order: usize },
}

impl PolicyFamily {
    fn context_of<'a>(&self, prefix: &'a [Token]) -> &'a [Token] {
        match self {
            PolicyFamily::TabularFullContext => prefix,
            PolicyFamily::Ngram { order } => {
                &prefix[prefix.len().saturating_sub(order.saturating_sub(1))..]
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
    out
}

/// Softmax policy with per-context logits, lazily initialized from a base
/// model.
#[derive(Clone, Debug)]
pub struct Policy {
    base: ArModel,
    family: PolicyFamily,
    overrides: HashMap<Vec<Token>, Vec<f64>>,
}

impl Policy {
    /// Fresh policy whose distribution matches `base` (up to the logit
    /// floor on zero-probability tokens).
    pub fn new(base: ArModel, family: PolicyFamily) -> Self {
        Policy { base, family, overrides: HashMap::new() }
    }

    pub fn family(&self) -> PolicyFamily {
        self.family
    }

    pub fn base(&self) -> &ArModel {
        &self.base
    }

    /// Number of contexts with trained logits.
    pub fn touched_contexts(&self) -> usize {
        self.overrides.len()
    }

    fn init_logits(&self, ctx: &[Token]) -> Result<Vec<f64>, ModelError> {
        let probs = self.base.next_token_dist(ctx)?;
        Ok(probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln().max(LOGIT_FLOOR) } else { LOGIT_FLOOR })
            .collect())
    }

    /// Current logits at a context (initialized view when untouched).
    pub fn logits(&self, ctx: &[Token]) -> Result<Vec<f64>, ModelError> {
        match self.overrides.get(ctx) {
            Some(l) => Ok(l.clone()),
            None => self.init_logits(ctx),
        }
    }

    fn ensure_context(&mut self, ctx: &[Token]) -> Result<&mut Vec<f64>, ModelError> {
        if !self.overrides.contains_key(ctx) {
            let init = self.init_logits(ctx)?;
            self.overrides.insert(ctx.to_vec(), init);
        }
        Ok(self.overrides.get_mut(ctx).expect("just inserted"))
    }

    /// Shift one logit; used by finite-difference checks.
    pub fn nudge_logit(&mut self, ctx: &[Token], token: Token, delta: f64) -> Result<(), ModelError> {
        let l = self.ensure_context(ctx)?;
        l[token.index()] += delta;
        Ok(())
    }

    /// log π(y).
    pub fn log_prob(&self, seq: &Sequence) -> Result<f64, ModelError> {
        sequence_logprob(self, seq)
    }

    /// Sparse ∇_θ log π(y): for every step context, `1[v = y_t] − π(v|ctx)`.
    pub fn grad_log_prob(&self, seq: &Sequence) -> Result<HashMap<Vec<Token>, Vec<f64>>, ModelError> {
        let mut grad: HashMap<Vec<Token>, Vec<f64>> = HashMap::new();
        self.accumulate_grad_log_prob(seq, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Add `coef · ∇ log π(y)` into an accumulator.
    pub fn accumulate_grad_log_prob(
        &self,
        seq: &Sequence,
        coef: f64,
        acc: &mut HashMap<Vec<Token>, Vec<f64>>,
    ) -> Result<(), ModelError> {
        let tokens = seq.tokens();
        for i in 0..tokens.len() {
            let ctx = self.family.context_of(&tokens[..i]);
            let probs = self.next_token_dist(ctx)?;
            let entry = acc
                .entry(ctx.to_vec())
                .or_insert_with(|| vec![0.0; self.vocab().len()]);
            for (v, p) in probs.iter().enumerate() {
                let indicator = if v == tokens[i].index() { 1.0 } else { 0.0 };
                entry[v] += coef * (indicator - p);
            }
        }
        Ok(())
    }

    /// Apply `θ += scale · update` on the listed contexts.
    pub fn apply_update(
        &mut self,
        update: &HashMap<Vec<Token>, Vec<f64>>,
        scale: f64,
    ) -> Result<(), ModelError> {
        for (ctx, u) in update {
            let l = self.ensure_context(ctx)?;
            for (li, ui) in l.iter_mut().zip(u.iter()) {
                *li += scale * ui;
            }
        }
        Ok(())
    }
}

impl SequenceModel for Policy {
    fn vocab(&self) -> &Vocab {
        self.base.vocab()
    }

    fn l_max(&self) -> usize {
        self.base.l_max()
    }

    fn next_token_dist(&self, prefix: &[Token]) -> Result<Vec<f64>, ModelError> {
        validate_prefix(self.vocab(), self.l_max(), prefix)?;
        let ctx = self.family.context_of(prefix);
        match self.overrides.get(ctx) {
            Some(logits) => Ok(softmax(logits)),
            None => Ok(softmax(&self.init_logits(ctx)?)),
        }
    }
}

/// Constraint hint for the prompting analog: tokens to boost and an
/// optional keyword run whose first occurrence switches the bias off.
#[derive(Clone, Debug)]
pub struct CapHint {
    pub boost: Vec<Token>,
    pub deactivate_after: Option<Vec<Token>>,
}

/// Constraint-aware proposal: the base model with a logit bias on
/// constraint-relevant tokens, deactivating once the keyword has occurred.
pub fn cap_model(base: &ArModel, hint: &CapHint, bias_magnitude: f64) -> Result<ArModel, ModelError> {
    let mut bias = BTreeMap::new();
    for &t in &hint.boost {
        bias.insert(t, bias_magnitude);
    }
    let rule = match &hint.deactivate_after {
        Some(kw) => DeactivationRule::AfterKeyword(kw.clone()),
        None => DeactivationRule::Never,
    };
    apply_logit_bias(base.clone(), &bias, rule)
}

/// Sampling budgets for the combined warm-start schedule.
#[derive(Clone, Copy, Debug)]
pub struct TrainingBudget {
    /// Total proposal samples across both phases.
    pub total: u64,
    /// Samples drawn from the CAP proposal before DPG takes over.
    pub cap_phase: u64,
}

impl TrainingBudget {
    pub fn new(total: u64, cap_phase: u64) -> Result<Self, TrainError> {
        if cap_phase > total {
            return Err(TrainError::InvalidParameter(format!(
                "cap phase {cap_phase} exceeds total budget {total}"
            )));
        }
        Ok(TrainingBudget { total, cap_phase })
    }
}

/// One exact checkpoint on a learning curve.
#[derive(Clone, Debug, serde::Serialize)]
pub struct CurvePoint {
    /// Proposal samples consumed so far.
    pub samples: u64,
    /// Exact KL(g‖π) by enumeration.
    pub kl_gold_policy: f64,
    /// Exact acceptance rate of π under the constraint.
    pub ar_exact: f64,
    /// Wall-clock since training start; measurement only, excluded from
    /// deterministic artifacts.
    pub wall_ms: u64,
}

/// Checkpointed training trajectory.
#[derive(Clone, Debug)]
pub struct LearningCurve {
    pub method: String,
    pub points: Vec<CurvePoint>,
    /// Total proposal draws consumed; equals the declared budget exactly.
    pub draws_consumed: u64,
    /// Constraint-satisfying draws among them.
    pub accepted: u64,
    /// True when a warm start found no accepted CAP samples and degraded to
    /// a cold start.
    pub warm_fallback: bool,
}

impl LearningCurve {
    /// Deterministic artifact form: `samples,kl_gold_policy,ar_exact`.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "samples,kl_gold_policy,ar_exact")?;
        for p in &self.points {
            writeln!(w, "{},{:.16e},{:.16e}", p.samples, p.kl_gold_policy, p.ar_exact)?;
        }
        Ok(())
    }

    /// Diagnostic form with wall-clock timings (not byte-reproducible).
    pub fn write_csv_with_timings(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "samples,kl_gold_policy,ar_exact,wall_ms")?;
        for p in &self.points {
            writeln!(w, "{},{:.16e},{:.16e},{}", p.samples, p.kl_gold_policy, p.ar_exact, p.wall_ms)?;
        }
        Ok(())
    }
}

/// Knobs shared by the trainers.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// DPG step size on logits.
    pub alpha: f64,
    /// Samples per DPG step; the step applies the batch-averaged update.
    pub samples_per_step: u64,
    /// Checkpoint cadence in samples; 0 means every 5% of the budget.
    pub checkpoint_every: u64,
    /// Enumeration cap for the exact checkpoint evaluations.
    pub enum_budget: usize,
    /// Cross-entropy fit: max gradient-descent iterations.
    pub fit_steps: usize,
    /// Cross-entropy fit: step size.
    pub fit_alpha: f64,
    /// Cross-entropy fit: stop when the gradient infinity-norm falls below
    /// this.
    pub fit_tol: f64,
    /// Cross-entropy fit: prior pseudo-counts shrinking each context's
    /// target toward the policy's pre-fit conditional. Zero recovers the
    /// pure add-ε-smoothed empirical target.
    pub fit_prior_count: f64,
    /// Abort when checkpoint KL exceeds this multiple of its initial value.
    pub divergence_factor: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            alpha: 0.1,
            samples_per_step: 500,
            checkpoint_every: 0,
            enum_budget: DEFAULT_ENUM_BUDGET,
            fit_steps: 80,
            fit_alpha: 1.0,
            fit_tol: 1e-4,
            fit_prior_count: 0.0,
            divergence_factor: 10.0,
        }
    }
}

/// Add-ε smoothing on empirical conditionals (keeps fitted models
/// absolutely continuous for exact KL).
pub const SFT_SMOOTHING_EPS: f64 = 1e-6;

/// Reference floor for divergence detection: a policy initialized at (or
/// near) the gold distribution has initial KL ≈ 0, where a literal
/// 10×-initial rule would abort on any sampling noise.
pub const DIVERGENCE_KL_FLOOR: f64 = 0.01;

/// Outcome of a cross-entropy fit.
#[derive(Clone, Copy, Debug)]
pub struct FitReport {
    pub steps_run: usize,
    pub grad_inf_norm: f64,
}

/// Fit the policy to a sample set by per-context gradient descent on the
/// cross-entropy toward add-ε-smoothed empirical conditionals. Stops at
/// `steps` iterations or when the gradient infinity-norm drops below `tol`.
pub fn fit_cross_entropy(
    policy: &mut Policy,
    samples: &[Sequence],
    steps: usize,
    alpha: f64,
    tol: f64,
    prior_count: f64,
) -> Result<FitReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::DegenerateDataset);
    }
    let vocab_len = policy.vocab().len();
    // Empirical next-token counts per policy context.
    let mut counts: HashMap<Vec<Token>, Vec<f64>> = HashMap::new();
    for seq in samples {
        let tokens = seq.tokens();
        for i in 0..tokens.len() {
            let ctx = policy.family.context_of(&tokens[..i]);
            counts
                .entry(ctx.to_vec())
                .or_insert_with(|| vec![0.0; vocab_len])[tokens[i].index()] += 1.0;
        }
    }
    // Targets: add-ε-smoothed empirical conditionals, optionally shrunk by
    // `prior_count` pseudo-counts of the policy's pre-fit conditional (a
    // Dirichlet-MAP guard for sparsely visited contexts). The descent
    // direction is the gradient of the dataset mean cross-entropy, so each
    // context also moves in proportion to how often the data visits it.
    let n_samples = samples.len() as f64;
    let targets: Vec<(Vec<Token>, f64, Vec<f64>)> = {
        let mut ts: Vec<(Vec<Token>, f64, Vec<f64>)> = Vec::new();
        for (ctx, cs) in counts {
            let prior = if prior_count > 0.0 {
                policy.next_token_dist(&ctx)?
            } else {
                vec![0.0; vocab_len]
            };
            let total: f64 = cs.iter().sum();
            let denom = total + prior_count + SFT_SMOOTHING_EPS * vocab_len as f64;
            let q = cs
                .iter()
                .zip(prior.iter())
                .map(|(&c, &p)| (c + prior_count * p + SFT_SMOOTHING_EPS) / denom)
                .collect();
            ts.push((ctx, total / n_samples, q));
        }
        ts.sort_by(|a, b| a.0.cmp(&b.0)); // deterministic sweep order
        ts
    };
    let mut report = FitReport { steps_run: 0, grad_inf_norm: f64::INFINITY };
    for step in 0..steps {
        let mut inf_norm = 0.0f64;
        for (ctx, weight, q) in &targets {
            let logits = policy.ensure_context(ctx)?;
            let probs = softmax(logits);
            for v in 0..vocab_len {
                let g = weight * (probs[v] - q[v]);
                inf_norm = inf_norm.max(g.abs());
                logits[v] -= alpha * g;
            }
        }
        report.steps_run = step + 1;
        report.grad_inf_norm = inf_norm;
        if inf_norm <= tol {
            break;
        }
    }
    Ok(report)
}

/// Exact KL(g‖π) and exact AR(π) in one sweep of the full prefix tree.
/// `z` is the exact partition function of (base, b).
pub fn exact_kl_ar<MB: SequenceModel + ?Sized, MP: SequenceModel + ?Sized>(
    base: &MB,
    b: &ConstraintPredicate,
    z: f64,
    policy: &MP,
    budget: usize,
) -> Result<(f64, f64), TrainError> {
    struct Walk<'w, MB: ?Sized, MP: ?Sized> {
        base: &'w MB,
        policy: &'w MP,
        b: &'w ConstraintPredicate,
        ln_z: f64,
        z: f64,
        l_max: usize,
        budget: usize,
        leaves: usize,
        kl: CompensatedSum,
        kl_infinite: bool,
        ar: CompensatedSum,
        buf: Vec<Token>,
    }
    impl<MB: SequenceModel + ?Sized, MP: SequenceModel + ?Sized> Walk<'_, MB, MP> {
        fn leaf(&mut self, p_a: f64, p_pi: f64) -> Result<(), TrainError> {
            self.leaves += 1;
            if self.leaves > self.budget {
                return Err(TrainError::Model(ModelError::EnumerationTooLarge {
                    budget: self.budget,
                }));
            }
            if self.b.evaluate(&self.buf) {
                self.ar.add(p_pi);
                if p_a > 0.0 {
                    if p_pi > 0.0 {
                        let g = p_a / self.z;
                        self.kl.add(g * (p_a.ln() - self.ln_z - p_pi.ln()));
                    } else {
                        // Gold mass outside the policy support.
                        self.kl_infinite = true;
                    }
                }
            }
            Ok(())
        }

        fn node(&mut self, p_a: f64, p_pi: f64) -> Result<(), TrainError> {
            let dist_pi = if p_pi > 0.0 {
                Some(self.policy.next_token_dist(&self.buf)?)
            } else {
                None
            };
            let dist_a = if p_a > 0.0 {
                Some(self.base.next_token_dist(&self.buf)?)
            } else {
                None
            };
            let depth = self.buf.len();
            let n = self.base.vocab().len();
            for v in 0..n {
                let pa_child = p_a * dist_a.as_ref().map_or(0.0, |d| d[v]);
                let ppi_child = p_pi * dist_pi.as_ref().map_or(0.0, |d| d[v]);
                if pa_child <= 0.0 && ppi_child <= 0.0 {
                    continue;
                }
                let t = Token(v as u16);
                self.buf.push(t);
                if t.is_eos() || depth + 1 == self.l_max {
                    self.leaf(pa_child, ppi_child)?;
                } else {
                    self.node(pa_child, ppi_child)?;
                }
                self.buf.pop();
            }
            Ok(())
        }
    }

    let mut walk = Walk {
        base,
        policy,
        b,
        ln_z: z.ln(),
        z,
        l_max: base.l_max(),
        budget,
        leaves: 0,
        kl: CompensatedSum::new(),
        kl_infinite: false,
        ar: CompensatedSum::new(),
        buf: Vec::new(),
    };
    walk.node(1.0, 1.0)?;
    let kl = if walk.kl_infinite { f64::INFINITY } else { walk.kl.value() };
    Ok((kl, walk.ar.value()))
}

fn checkpoint_cadence(budget: u64, requested: u64) -> u64 {
    if requested > 0 {
        requested
    } else {
        (budget / 20).max(1)
    }
}

struct DpgState {
    z_hat: f64,
    n_seen: u64,
}

/// Core DPG loop: sample from the evolving policy, maintain the
/// moving-average partition estimate, and take batch-averaged
/// importance-weighted gradient steps. Checkpoints record exact KL and AR.
fn dpg_loop<M: SequenceModel + ?Sized>(
    base: &M,
    b: &ConstraintPredicate,
    z_exact: f64,
    policy: &mut Policy,
    budget: u64,
    sample_offset: u64,
    opts: &TrainOptions,
    rng: &mut RngStream,
    curve: &mut LearningCurve,
    started: Instant,
    state: &mut DpgState,
) -> Result<(), TrainError> {
    let initial_kl = match curve.points.first() {
        Some(p) => p.kl_gold_policy,
        None => {
            let (kl, ar) = exact_kl_ar(base, b, z_exact, policy, opts.enum_budget)?;
            curve.points.push(CurvePoint {
                samples: sample_offset,
                kl_gold_policy: kl,
                ar_exact: ar,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            kl
        }
    };
    let initial_kl = initial_kl.max(DIVERGENCE_KL_FLOOR);
    let cadence = checkpoint_cadence(budget + sample_offset, opts.checkpoint_every);
    let mut consumed = 0u64;
    let mut next_checkpoint = cadence.saturating_sub(sample_offset % cadence.max(1)).max(1);
    let mut grad: HashMap<Vec<Token>, Vec<f64>> = HashMap::new();
    while consumed < budget {
        let step_n = opts
            .samples_per_step
            .min(budget - consumed)
            .min(next_checkpoint.saturating_sub(consumed).max(1));
        grad.clear();
        for _ in 0..step_n {
            let (y, log_pi) = sample_sequence_with_logprob(policy, rng)?;
            state.n_seen += 1;
            let w = if b.evaluate(y.tokens()) {
                let lp_base = sequence_logprob(base, &y)?;
                if lp_base > f64::NEG_INFINITY {
                    (lp_base - log_pi).exp()
                } else {
                    0.0
                }
            } else {
                0.0
            };
            state.z_hat = ((state.n_seen - 1) as f64 * state.z_hat + w) / state.n_seen as f64;
            if w > 0.0 {
                curve.accepted += 1;
                let coef = w / state.z_hat;
                policy.accumulate_grad_log_prob(&y, coef, &mut grad)?;
            }
        }
        policy.apply_update(&grad, opts.alpha / step_n as f64)?;
        consumed += step_n;
        curve.draws_consumed += step_n;
        if consumed >= next_checkpoint || consumed == budget {
            let (kl, ar) = exact_kl_ar(base, b, z_exact, policy, opts.enum_budget)?;
            curve.points.push(CurvePoint {
                samples: sample_offset + consumed,
                kl_gold_policy: kl,
                ar_exact: ar,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            if kl > opts.divergence_factor * initial_kl {
                return Err(TrainError::Diverged {
                    kl,
                    initial: initial_kl,
                    samples: sample_offset + consumed,
                });
            }
            while next_checkpoint <= consumed {
                next_checkpoint += cadence;
            }
        }
    }
    Ok(())
}

/// Cold-start DPG from an explicit initial policy.
pub fn dpg_train<M: SequenceModel + ?Sized>(
    base: &M,
    b: &ConstraintPredicate,
    init: Policy,
    budget: u64,
    opts: &TrainOptions,
    rng: &mut RngStream,
) -> Result<(Policy, LearningCurve), TrainError> {
    let z_exact = crate::gold::exact_partition(base, b, opts.enum_budget)?;
    let mut policy = init;
    let mut curve = LearningCurve {
        method: "dpg".into(),
        points: Vec::new(),
        draws_consumed: 0,
        accepted: 0,
        warm_fallback: false,
    };
    let mut state = DpgState { z_hat: 0.0, n_seen: 0 };
    let started = Instant::now();
    dpg_loop(base, b, z_exact, &mut policy, budget, 0, opts, rng, &mut curve, started, &mut state)?;
    Ok((policy, curve))
}

/// SFT: stream `budget` draws from the base model, keep the satisfying
/// ones, and at every checkpoint refit the policy on the accepted set so
/// far. Errors when the whole budget yields no accepted sample.
pub fn sft_train(
    base: &ArModel,
    b: &ConstraintPredicate,
    budget: u64,
    family: PolicyFamily,
    opts: &TrainOptions,
    rng: &mut RngStream,
) -> Result<(Policy, LearningCurve), TrainError> {
    if budget == 0 {
        return Err(TrainError::InvalidParameter("SFT budget must be positive".into()));
    }
    let z_exact = crate::gold::exact_partition(base, b, opts.enum_budget)?;
    let started = Instant::now();
    let mut policy = Policy::new(base.clone(), family);
    let mut curve = LearningCurve {
        method: "sft".into(),
        points: Vec::new(),
        draws_consumed: 0,
        accepted: 0,
        warm_fallback: false,
    };
    let (kl0, ar0) = exact_kl_ar(base, b, z_exact, &policy, opts.enum_budget)?;
    curve.points.push(CurvePoint {
        samples: 0,
        kl_gold_policy: kl0,
        ar_exact: ar0,
        wall_ms: started.elapsed().as_millis() as u64,
    });
    let cadence = checkpoint_cadence(budget, opts.checkpoint_every);
    let mut accepted: Vec<Sequence> = Vec::new();
    let mut consumed = 0u64;
    while consumed < budget {
        let step_n = cadence.min(budget - consumed);
        for _ in 0..step_n {
            let (y, _) = sample_sequence_with_logprob(base, rng)?;
            if b.evaluate(y.tokens()) {
                accepted.push(y);
            }
        }
        consumed += step_n;
        curve.draws_consumed += step_n;
        curve.accepted = accepted.len() as u64;
        if !accepted.is_empty() {
            policy = Policy::new(base.clone(), family);
            fit_cross_entropy(
                &mut policy,
                &accepted,
                opts.fit_steps,
                opts.fit_alpha,
                opts.fit_tol,
                opts.fit_prior_count,
            )?;
        }
        let (kl, ar) = exact_kl_ar(base, b, z_exact, &policy, opts.enum_budget)?;
        curve.points.push(CurvePoint {
            samples: consumed,
            kl_gold_policy: kl,
            ar_exact: ar,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    if accepted.is_empty() {
        return Err(TrainError::DegenerateDataset);
    }
    Ok((policy, curve))
}

/// Warm-start DPG: draw the CAP-phase budget from the CAP proposal, filter,
/// fit the policy on the accepted set, then run DPG with the remaining
/// budget. An empty CAP harvest degrades to a cold start with a logged
/// warning rather than failing the run.
pub fn warm_start_dpg(
    base: &ArModel,
    b: &ConstraintPredicate,
    cap: &ArModel,
    budget: TrainingBudget,
    family: PolicyFamily,
    opts: &TrainOptions,
    rng: &mut RngStream,
) -> Result<(Policy, LearningCurve), TrainError> {
    let z_exact = crate::gold::exact_partition(base, b, opts.enum_budget)?;
    let started = Instant::now();
    let mut policy = Policy::new(base.clone(), family);
    let mut curve = LearningCurve {
        method: "warm-dpg".into(),
        points: Vec::new(),
        draws_consumed: 0,
        accepted: 0,
        warm_fallback: false,
    };
    let (kl0, ar0) = exact_kl_ar(base, b, z_exact, &policy, opts.enum_budget)?;
    curve.points.push(CurvePoint {
        samples: 0,
        kl_gold_policy: kl0,
        ar_exact: ar0,
        wall_ms: started.elapsed().as_millis() as u64,
    });
    let mut accepted: Vec<Sequence> = Vec::new();
    for _ in 0..budget.cap_phase {
        let (y, _) = sample_sequence_with_logprob(cap, rng)?;
        if b.evaluate(y.tokens()) {
            accepted.push(y);
        }
    }
    curve.draws_consumed += budget.cap_phase;
    curve.accepted = accepted.len() as u64;
    if budget.cap_phase > 0 {
        if accepted.is_empty() {
            eprintln!("warm-start: CAP phase accepted no samples; falling back to cold start");
            curve.warm_fallback = true;
        } else {
            fit_cross_entropy(
                &mut policy,
                &accepted,
                opts.fit_steps,
                opts.fit_alpha,
                opts.fit_tol,
                opts.fit_prior_count,
            )?;
        }
        let (kl, ar) = exact_kl_ar(base, b, z_exact, &policy, opts.enum_budget)?;
        curve.points.push(CurvePoint {
            samples: budget.cap_phase,
            kl_gold_policy: kl,
            ar_exact: ar,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    let mut state = DpgState { z_hat: 0.0, n_seen: 0 };
    dpg_loop(
        base,
        b,
        z_exact,
        &mut policy,
        budget.total - budget.cap_phase,
        budget.cap_phase,
        opts,
        rng,
        &mut curve,
        started,
        &mut state,
    )?;
    curve.method = "warm-dpg".into();
    Ok((policy, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gold::FilteredModel;
    use crate::vocab::EOS;

    fn vocab3() -> Vocab {
        Vocab::new(&["a", "b"]).unwrap()
    }

    fn small_base() -> ArModel {
        // Order-2 model over {a, b} with some dependence.
        let a = Token(1);
        let b = Token(2);
        let corpus = vec![
            vec![a, b, a],
            vec![a, a, b],
            vec![b, a],
            vec![b, b, a],
            vec![a, b],
            vec![b, a, a],
        ];
        ArModel::fit_ngram(vocab3(), 4, 2, &corpus).unwrap()
    }

    #[test]
    fn fresh_policy_matches_base() {
        let base = small_base();
        let policy = Policy::new(base.clone(), PolicyFamily::TabularFullContext);
        for prefix in [vec![], vec![Token(1)], vec![Token(2), Token(1)]] {
            let pb = base.next_token_dist(&prefix).unwrap();
            let pp = policy.next_token_dist(&prefix).unwrap();
            for (x, y) in pb.iter().zip(pp.iter()) {
                assert!((x - y).abs() < 1e-12, "prefix {prefix:?}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        let base = small_base();
        let policy = Policy::new(base, PolicyFamily::TabularFullContext);
        let seq = Sequence::new(vec![Token(1), Token(2), EOS]).unwrap();
        let grad = policy.grad_log_prob(&seq).unwrap();
        let h = 1e-5;
        for (ctx, g) in &grad {
            for v in 0..3 {
                let mut plus = policy.clone();
                plus.nudge_logit(ctx, Token(v as u16), h).unwrap();
                let mut minus = policy.clone();
                minus.nudge_logit(ctx, Token(v as u16), -h).unwrap();
                let fd = (plus.log_prob(&seq).unwrap() - minus.log_prob(&seq).unwrap()) / (2.0 * h);
                let denom = fd.abs().max(1e-3);
                assert!(
                    (g[v] - fd).abs() / denom <= 1e-6,
                    "ctx {ctx:?} v {v}: analytic {} vs fd {}",
                    g[v],
                    fd
                );
            }
        }
    }

    #[test]
    fn fit_single_repeated_sequence_concentrates() {
        let base = small_base();
        let mut policy = Policy::new(base, PolicyFamily::TabularFullContext);
        let seq = Sequence::new(vec![Token(1), Token(2), EOS]).unwrap();
        let samples = vec![seq.clone(); 50];
        fit_cross_entropy(&mut policy, &samples, 5000, 1.0, 1e-12, 0.0).unwrap();
        assert!(policy.log_prob(&seq).unwrap().exp() >= 0.99);
    }

    #[test]
    fn fit_matches_smoothed_empirical_counts() {
        // Interior targets: every token observed at every touched context
        // (l_max = 2, so the contexts are just [], [a], [b]). Gradient
        // descent then converges geometrically all the way down.
        let base = ArModel::uniform(vocab3(), 2).unwrap();
        let mut policy = Policy::new(base, PolicyFamily::TabularFullContext);
        let a = Token(1);
        let b = Token(2);
        let mk = |toks: Vec<Token>| Sequence::new(toks).unwrap();
        let samples = vec![
            mk(vec![EOS]),
            mk(vec![a, EOS]),
            mk(vec![a, a]),
            mk(vec![a, b]),
            mk(vec![a, a]),
            mk(vec![b, EOS]),
            mk(vec![b, a]),
            mk(vec![b, b]),
        ];
        let report = fit_cross_entropy(&mut policy, &samples, 20000, 1.0, 1e-9, 0.0).unwrap();
        // At the closed-form optimum the analytic gradient vanishes.
        assert!(report.grad_inf_norm <= 1e-8, "grad inf norm {}", report.grad_inf_norm);
        // Root context: counts eos:1, a:4, b:3 of 8.
        let probs = policy.next_token_dist(&[]).unwrap();
        let denom = 8.0 + SFT_SMOOTHING_EPS * 3.0;
        let expect = [
            (1.0 + SFT_SMOOTHING_EPS) / denom,
            (4.0 + SFT_SMOOTHING_EPS) / denom,
            (3.0 + SFT_SMOOTHING_EPS) / denom,
        ];
        for (p, e) in probs.iter().zip(expect.iter()) {
            assert!((p - e).abs() <= 1e-6, "{p} vs {e}");
        }
        // Context [a]: counts eos:1, a:2, b:1 of 4.
        let probs = policy.next_token_dist(&[a]).unwrap();
        let denom = 4.0 + SFT_SMOOTHING_EPS * 3.0;
        let expect = [
            (1.0 + SFT_SMOOTHING_EPS) / denom,
            (2.0 + SFT_SMOOTHING_EPS) / denom,
            (1.0 + SFT_SMOOTHING_EPS) / denom,
        ];
        for (p, e) in probs.iter().zip(expect.iter()) {
            assert!((p - e).abs() <= 1e-6, "{p} vs {e}");
        }
    }

    #[test]
    fn fit_empty_dataset_errors() {
        let base = small_base();
        let mut policy = Policy::new(base, PolicyFamily::TabularFullContext);
        assert!(matches!(
            fit_cross_entropy(&mut policy, &[], 10, 1.0, 1e-4, 0.0),
            Err(TrainError::DegenerateDataset)
        ));
    }

    #[test]
    fn cap_zero_bias_is_base() {
        let base = small_base();
        let hint = CapHint { boost: vec![Token(2)], deactivate_after: Some(vec![Token(2)]) };
        let cap = cap_model(&base, &hint, 0.0).unwrap();
        for prefix in [vec![], vec![Token(1)]] {
            let pb = base.next_token_dist(&prefix).unwrap();
            let pc = cap.next_token_dist(&prefix).unwrap();
            for (x, y) in pb.iter().zip(pc.iter()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exact_kl_ar_agrees_with_table_computation() {
        let base = small_base();
        let b = ConstraintPredicate::ContainsKeyword(vec![Token(2)]);
        let fm = FilteredModel::new(base.clone(), b.clone(), 100_000).unwrap();
        let policy = Policy::new(base.clone(), PolicyFamily::TabularFullContext);
        let (kl, ar) = exact_kl_ar(&base, &b, fm.exact_partition(), &policy, 100_000).unwrap();
        // Fresh policy == base, so KL(g||pi) = KL(g||a) = -ln Z and AR = Z.
        assert!((kl - fm.kl_gold_base()).abs() < 1e-9, "{kl}");
        assert!((ar - fm.exact_partition()).abs() < 1e-9, "{ar}");
    }

    #[test]
    fn dpg_fixed_point_stays_put() {
        // Policy initialized at exact g: importance weights are 1 on the
        // support and the expected update vanishes.
        let base = small_base();
        let b = ConstraintPredicate::ContainsKeyword(vec![Token(2)]);
        let fm = FilteredModel::new(base.clone(), b.clone(), 100_000).unwrap();
        let g_model =
            ArModel::from_dist_table(base.vocab().clone(), base.l_max(), fm.exact_gold()).unwrap();
        let init = Policy::new(g_model, PolicyFamily::TabularFullContext);
        let opts = TrainOptions { samples_per_step: 200, ..TrainOptions::default() };
        let mut rng = RngStream::derive(11, "dpg-fixed-point");
        let (_, curve) = dpg_train(&base, &b, init, 4000, &opts, &mut rng).unwrap();
        for p in &curve.points {
            assert!(p.kl_gold_policy <= 1e-3, "KL drifted to {}", p.kl_gold_policy);
        }
        assert_eq!(curve.draws_consumed, 4000);
    }

    #[test]
    fn dpg_improves_on_small_instance() {
        let base = small_base();
        let b = ConstraintPredicate::ContainsKeyword(vec![Token(2)]);
        let init = Policy::new(base.clone(), PolicyFamily::TabularFullContext);
        let opts = TrainOptions { samples_per_step: 250, ..TrainOptions::default() };
        let mut rng = RngStream::derive(12, "dpg-improve");
        let (_, curve) = dpg_train(&base, &b, init, 20_000, &opts, &mut rng).unwrap();
        let first = curve.points.first().unwrap().kl_gold_policy;
        let last = curve.points.last().unwrap().kl_gold_policy;
        assert!(last < 0.5 * first, "KL {first} -> {last}");
        assert_eq!(curve.draws_consumed, 20_000);
    }

    #[test]
    fn sft_trivial_filter_stays_near_base() {
        let base = small_base();
        let b = ConstraintPredicate::always();
        let opts = TrainOptions::default();
        let mut rng = RngStream::derive(13, "sft-trivial");
        let (_, curve) = sft_train(&base, &b, 20_000, PolicyFamily::TabularFullContext, &opts, &mut rng).unwrap();
        // With b == 1 the gold model is the base itself; fitting base samples
        // keeps KL near zero and shrinks with budget.
        let first_fit = curve.points[1].kl_gold_policy;
        let last = curve.points.last().unwrap().kl_gold_policy;
        assert!(last < 0.02, "KL {last}");
        assert!(last <= first_fit + 1e-9);
        assert_eq!(curve.draws_consumed, 20_000);
    }

    #[test]
    fn warm_start_bg_zero_equals_cold_start() {
        let base = small_base();
        let b = ConstraintPredicate::ContainsKeyword(vec![Token(2)]);
        let hint = CapHint { boost: vec![Token(2)], deactivate_after: Some(vec![Token(2)]) };
        let cap = cap_model(&base, &hint, 4.0).unwrap();
        let opts = TrainOptions { samples_per_step: 100, ..TrainOptions::default() };
        let budget = TrainingBudget::new(2000, 0).unwrap();
        let mut rng_warm = RngStream::derive(14, "paired");
        let (_, warm_curve) =
            warm_start_dpg(&base, &b, &cap, budget, PolicyFamily::TabularFullContext, &opts, &mut rng_warm).unwrap();
        let mut rng_cold = RngStream::derive(14, "paired");
        let init = Policy::new(base.clone(), PolicyFamily::TabularFullContext);
        let (_, cold_curve) = dpg_train(&base, &b, init, 2000, &opts, &mut rng_cold).unwrap();
        assert_eq!(warm_curve.points.len(), cold_curve.points.len());
        for (w, c) in warm_curve.points.iter().zip(cold_curve.points.iter()) {
            assert_eq!(w.samples, c.samples);
            assert!((w.kl_gold_policy - c.kl_gold_policy).abs() < 1e-12);
        }
    }

    #[test]
    fn warm_start_bg_equals_total_is_pure_cap_sft() {
        let base = small_base();
        let b = ConstraintPredicate::ContainsKeyword(vec![Token(2)]);
        let hint = CapHint { boost: vec![Token(2)], deactivate_after: Some(vec![Token(2)]) };
        let cap = cap_model(&base, &hint, 4.0).unwrap();
        let opts = TrainOptions::default();
        let budget = TrainingBudget::new(1500, 1500).unwrap();
        let mut rng = RngStream::derive(15, "pure-cap");
        let (_, curve) =
            warm_start_dpg(&base, &b, &cap, budget, PolicyFamily::TabularFullContext, &opts, &mut rng).unwrap();
        assert_eq!(curve.draws_consumed, 1500);
        assert_eq!(curve.points.last().unwrap().samples, 1500);
    }

    #[test]
    fn budget_validation() {
        assert!(TrainingBudget::new(10, 20).is_err());
    }

    #[test]
    fn exact_kl_ar_reports_infinity_on_support_escape() {
        // A base with gold mass on sequences a zero-probability "policy"
        // cannot produce; the evaluator must report +inf, not NaN.
        let vocab = vocab3();
        let base = ArModel::per_step(vocab.clone(), vec![vec![0.0, 0.5, 0.5], vec![0.4, 0.3, 0.3]]).unwrap();
        let narrow = ArModel::per_step(vocab, vec![vec![0.0, 1.0, 0.0], vec![0.4, 0.3, 0.3]]).unwrap();
        let b = ConstraintPredicate::always();
        let (kl, ar) = exact_kl_ar(&base, &b, 1.0, &narrow, 100_000).unwrap();
        assert!(kl.is_infinite() && kl > 0.0, "kl = {kl}");
        assert!((ar - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_dpg_yields_only_the_initial_point() {
        let base = small_base();
        let b = ConstraintPredicate::ContainsKeyword(vec![Token(2)]);
        let fm = FilteredModel::new(base.clone(), b.clone(), 100_000).unwrap();
        let init = Policy::new(base.clone(), PolicyFamily::TabularFullContext);
        let mut rng = RngStream::derive(16, "zero-budget");
        let (_, curve) = dpg_train(&base, &b, init, 0, &TrainOptions::default(), &mut rng).unwrap();
        assert_eq!(curve.points.len(), 1);
        assert_eq!(curve.points[0].samples, 0);
        assert_eq!(curve.draws_consumed, 0);
        assert!((curve.points[0].kl_gold_policy - fm.kl_gold_base()).abs() < 1e-9);
    }
}
