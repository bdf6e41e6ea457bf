//! Divergence and diversity measurement.
//!
//! All divergences are in nats. Exact quantities are computed by
//! enumeration; the Monte-Carlo estimator mirrors the protocol used when
//! enumeration is out of reach and is validated against the exact values.

use std::collections::HashMap;

use serde::Serialize;

use crate::constraints::ConstraintPredicate;
use crate::dist::DistTable;
use crate::error::{GoldError, MetricsError, ModelError};
use crate::model::{sequence_logprob, SequenceModel};
use crate::num::{kl_term, CompensatedSum};
use crate::sequence::Sequence;
use crate::vocab::Token;

/// Serialize possibly non-finite f64 as a number or a string marker, since
/// JSON has no inf/nan literals.
fn ser_f64<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

/// The information-geometry quadruple for a proposal against a filtered
/// base, with residuals of the two identities it must satisfy:
/// KL(g‖a') = KL(g‖g') + KL(g'‖a') and KL(g'‖a') = −log AR.
#[derive(Clone, Debug, Serialize)]
pub struct KlReport {
    #[serde(serialize_with = "ser_f64")]
    pub kl_g_aprime: f64,
    #[serde(serialize_with = "ser_f64")]
    pub kl_g_gprime: f64,
    #[serde(serialize_with = "ser_f64")]
    pub kl_gprime_aprime: f64,
    #[serde(serialize_with = "ser_f64")]
    pub neg_log_ar: f64,
    #[serde(serialize_with = "ser_f64")]
    pub residual_pythagorean: f64,
    #[serde(serialize_with = "ser_f64")]
    pub residual_ar: f64,
    /// Exact Z of the base under the constraint.
    #[serde(serialize_with = "ser_f64")]
    pub z: f64,
    /// Exact Z' (acceptance rate) of the proposal under the constraint.
    #[serde(serialize_with = "ser_f64")]
    pub z_prime: f64,
    /// False when the gold support escapes the proposal support, making the
    /// g-divergences infinite.
    pub absolutely_continuous: bool,
    /// The embedding-based similarity column of the reference protocol;
    /// requires external embedders and is not computed here.
    pub semantic_similarity: Option<f64>,
}

struct PairWalk<'w, MA: ?Sized, MB: ?Sized> {
    a: &'w MA,
    aprime: &'w MB,
    b: &'w ConstraintPredicate,
    l_max: usize,
    budget: usize,
    leaves: usize,
    buf: Vec<Token>,
}

impl<MA: SequenceModel + ?Sized, MB: SequenceModel + ?Sized> PairWalk<'_, MA, MB> {
    fn run(
        &mut self,
        p_a: f64,
        p_ap: f64,
        on_leaf: &mut dyn FnMut(&[Token], bool, f64, f64),
    ) -> Result<(), MetricsError> {
        let dist_a = if p_a > 0.0 { Some(self.a.next_token_dist(&self.buf)?) } else { None };
        let dist_ap = if p_ap > 0.0 { Some(self.aprime.next_token_dist(&self.buf)?) } else { None };
        let depth = self.buf.len();
        let n = self.a.vocab().len();
        for v in 0..n {
            let pa_child = p_a * dist_a.as_ref().map_or(0.0, |d| d[v]);
            let pap_child = p_ap * dist_ap.as_ref().map_or(0.0, |d| d[v]);
            if pa_child <= 0.0 && pap_child <= 0.0 {
                continue;
            }
            let t = Token(v as u16);
            self.buf.push(t);
            if t.is_eos() || depth + 1 == self.l_max {
                self.leaves += 1;
                if self.leaves > self.budget {
                    self.buf.pop();
                    return Err(MetricsError::Model(ModelError::EnumerationTooLarge {
                        budget: self.budget,
                    }));
                }
                let sat = self.b.evaluate(&self.buf);
                on_leaf(&self.buf, sat, pa_child, pap_child);
            } else {
                self.run(pa_child, pap_child, on_leaf)?;
            }
            self.buf.pop();
        }
        Ok(())
    }
}

/// Exact Theorem-2 quadruple for (a, b, a'), by enumeration. Infinite
/// divergences (gold support escaping the proposal) are reported as +inf
/// with the absolute-continuity flag cleared.
pub fn theorem2_report<MA: SequenceModel + ?Sized, MB: SequenceModel + ?Sized>(
    a: &MA,
    b: &ConstraintPredicate,
    aprime: &MB,
    budget: usize,
) -> Result<KlReport, MetricsError> {
    // Pass 1: both partition functions.
    let mut z = CompensatedSum::new();
    let mut z_prime = CompensatedSum::new();
    {
        let mut walk = PairWalk { a, aprime, b, l_max: a.l_max(), budget, leaves: 0, buf: Vec::new() };
        walk.run(1.0, 1.0, &mut |_, sat, pa, pap| {
            if sat {
                z.add(pa);
                z_prime.add(pap);
            }
        })?;
    }
    let z = z.value();
    let z_prime = z_prime.value();
    if z <= 0.0 {
        return Err(MetricsError::Gold(GoldError::EmptyGoldSupport));
    }
    if z_prime <= 0.0 {
        // The proposal puts no mass at all on the constraint set.
        return Ok(KlReport {
            kl_g_aprime: f64::INFINITY,
            kl_g_gprime: f64::INFINITY,
            kl_gprime_aprime: f64::NAN,
            neg_log_ar: f64::INFINITY,
            residual_pythagorean: f64::NAN,
            residual_ar: f64::NAN,
            z,
            z_prime,
            absolutely_continuous: false,
            semantic_similarity: None,
        });
    }
    // Pass 2: the three divergences, each as its own direct sum.
    let (ln_z, ln_zp) = (z.ln(), z_prime.ln());
    let mut kl_g_ap = CompensatedSum::new();
    let mut kl_g_gp = CompensatedSum::new();
    let mut kl_gp_ap = CompensatedSum::new();
    let mut continuous = true;
    {
        let mut walk = PairWalk { a, aprime, b, l_max: a.l_max(), budget, leaves: 0, buf: Vec::new() };
        walk.run(1.0, 1.0, &mut |_, sat, pa, pap| {
            if !sat {
                return;
            }
            if pa > 0.0 {
                let g = pa / z;
                let ln_g = pa.ln() - ln_z;
                if pap > 0.0 {
                    kl_g_ap.add(g * (ln_g - pap.ln()));
                    kl_g_gp.add(g * (ln_g - (pap.ln() - ln_zp)));
                } else {
                    continuous = false;
                }
            }
            if pap > 0.0 {
                let gp = pap / z_prime;
                kl_gp_ap.add(gp * ((pap.ln() - ln_zp) - pap.ln()));
            }
        })?;
    }
    let (kl_g_aprime, kl_g_gprime) = if continuous {
        (kl_g_ap.value(), kl_g_gp.value())
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let kl_gprime_aprime = kl_gp_ap.value();
    let neg_log_ar = -ln_zp;
    let residual_pythagorean = if continuous {
        (kl_g_aprime - kl_g_gprime - kl_gprime_aprime).abs()
    } else {
        f64::NAN
    };
    Ok(KlReport {
        kl_g_aprime,
        kl_g_gprime,
        kl_gprime_aprime,
        neg_log_ar,
        residual_pythagorean,
        residual_ar: (kl_gprime_aprime - neg_log_ar).abs(),
        z,
        z_prime,
        absolutely_continuous: continuous,
        semantic_similarity: None,
    })
}

/// Monte-Carlo estimate of KL(g‖g') from gold samples:
/// mean of log a(y) − log a'(y), minus log(Z/Z').
#[derive(Clone, Debug, Serialize)]
pub struct KlEstimate {
    #[serde(serialize_with = "ser_f64")]
    pub value: f64,
    /// Empirical standard error of the sample-mean term.
    #[serde(serialize_with = "ser_f64")]
    pub stderr: f64,
    pub n_samples: usize,
    /// True when some sample had zero proposal mass (infinite ratio).
    pub infinite_ratio: bool,
}

pub fn kl_gg_estimator<MA: SequenceModel + ?Sized, MB: SequenceModel + ?Sized>(
    g_samples: &[Sequence],
    a: &MA,
    aprime: &MB,
    z: f64,
    z_prime: f64,
) -> Result<KlEstimate, MetricsError> {
    if g_samples.is_empty() {
        return Err(MetricsError::InvalidInput("no gold samples".into()));
    }
    if !(z > 0.0) || !(z_prime > 0.0) {
        return Err(MetricsError::InvalidInput("Z and Z' must be positive".into()));
    }
    let mut terms = Vec::with_capacity(g_samples.len());
    for y in g_samples {
        let la = sequence_logprob(a, y)?;
        let lap = sequence_logprob(aprime, y)?;
        if lap == f64::NEG_INFINITY {
            return Ok(KlEstimate {
                value: f64::INFINITY,
                stderr: f64::NAN,
                n_samples: g_samples.len(),
                infinite_ratio: true,
            });
        }
        terms.push(la - lap);
    }
    let n = terms.len() as f64;
    let mut mean = CompensatedSum::new();
    for &t in &terms {
        mean.add(t);
    }
    let mean = mean.value() / n;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let stderr = (var / n).sqrt();
    Ok(KlEstimate {
        value: mean - (z / z_prime).ln(),
        stderr,
        n_samples: terms.len(),
        infinite_ratio: false,
    })
}

/// Self-BLEU over a sample set: for each sample, the modified n-gram
/// precision of order `n` against the other K−1 samples as references,
/// with the standard brevity penalty, averaged over samples. Sequences are
/// compared on content tokens (EOS excluded).
#[derive(Clone, Debug, Serialize)]
pub struct SelfBleuScore {
    pub value: f64,
    /// Samples shorter than the gram order; they contribute precision 0.
    pub short_hypotheses: usize,
}

pub fn self_bleu(samples: &[Sequence], n: usize) -> Result<SelfBleuScore, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::InvalidInput("self-BLEU needs at least two samples".into()));
    }
    if n == 0 {
        return Err(MetricsError::InvalidInput("gram order must be at least 1".into()));
    }
    // Per-sample n-gram counts.
    let counts: Vec<HashMap<&[Token], usize>> = samples
        .iter()
        .map(|s| {
            let content = s.content();
            let mut m: HashMap<&[Token], usize> = HashMap::new();
            if content.len() >= n {
                for w in content.windows(n) {
                    *m.entry(w).or_insert(0) += 1;
                }
            }
            m
        })
        .collect();
    // For max-over-references clipping without a quadratic sweep: best and
    // second-best per gram across all samples, with the best's owner.
    struct Best {
        max: usize,
        owner: usize,
        second: usize,
    }
    let mut best: HashMap<&[Token], Best> = HashMap::new();
    for (i, m) in counts.iter().enumerate() {
        for (&gram, &c) in m {
            let e = best.entry(gram).or_insert(Best { max: 0, owner: usize::MAX, second: 0 });
            if c > e.max {
                e.second = e.max;
                e.max = c;
                e.owner = i;
            } else if c > e.second {
                e.second = c;
            }
        }
    }
    let lens: Vec<usize> = samples.iter().map(|s| s.content().len()).collect();
    let mut total = 0.0;
    let mut short = 0usize;
    for (i, m) in counts.iter().enumerate() {
        let c_len = lens[i];
        if c_len < n {
            short += 1;
            continue; // contributes 0
        }
        let hyp_total = c_len - n + 1;
        let mut clipped = 0usize;
        for (&gram, &c) in m {
            let b = &best[gram];
            let ref_max = if b.owner == i { b.second } else { b.max };
            clipped += c.min(ref_max);
        }
        let precision = clipped as f64 / hyp_total as f64;
        // Closest reference length (ties toward the shorter one).
        let mut r = lens[(i + 1) % lens.len()];
        for (j, &l) in lens.iter().enumerate() {
            if j == i {
                continue;
            }
            let (dl, dr) = (l.abs_diff(c_len), r.abs_diff(c_len));
            if dl < dr || (dl == dr && l < r) {
                r = l;
            }
        }
        let bp = if c_len >= r { 1.0 } else { (1.0 - r as f64 / c_len as f64).exp() };
        total += bp * precision;
    }
    Ok(SelfBleuScore { value: total / samples.len() as f64, short_hypotheses: short })
}

/// Histogram of the keyword's first-occurrence relative position.
/// The relative position is the 1-based index of the occurrence start over
/// the content length, in (0, 1]; bins split [0, 1] evenly with the last
/// bin closed.
#[derive(Clone, Debug, Serialize)]
pub struct PositionalHistogram {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl PositionalHistogram {
    pub fn masses(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    /// CSV export: `bin_lo,bin_hi,count`, bins in order.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "bin_lo,bin_hi,count")?;
        let n = self.counts.len() as f64;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{:.3},{:.3},{}", i as f64 / n, (i + 1) as f64 / n, c)?;
        }
        Ok(())
    }
}

fn first_occurrence_bin(content: &[Token], keyword: &[Token], n_bins: usize) -> Option<usize> {
    if keyword.is_empty() || keyword.len() > content.len() {
        return None;
    }
    let start = (0..=content.len() - keyword.len()).find(|&i| &content[i..i + keyword.len()] == keyword)?;
    let rel = (start + 1) as f64 / content.len() as f64;
    Some(((rel * n_bins as f64).floor() as usize).min(n_bins - 1))
}

pub fn positional_histogram(
    samples: &[Sequence],
    keyword: &[Token],
    n_bins: usize,
) -> Result<PositionalHistogram, MetricsError> {
    if n_bins == 0 {
        return Err(MetricsError::InvalidInput("need at least one bin".into()));
    }
    let mut counts = vec![0u64; n_bins];
    for s in samples {
        match first_occurrence_bin(s.content(), keyword, n_bins) {
            Some(b) => counts[b] += 1,
            None => {
                return Err(MetricsError::InvalidInput(format!(
                    "sample {s:?} does not contain the keyword; upstream guarantee violated"
                )))
            }
        }
    }
    Ok(PositionalHistogram { counts, total: samples.len() as u64 })
}

/// A finite projection of the sequence space, used both for histogram
/// binning and for projected (lower-bound) KL.
pub trait Projection {
    fn n_bins(&self) -> usize;
    /// Bin of a completed sequence, or None when the sequence lies outside
    /// the projection's domain.
    fn bin_of(&self, tokens: &[Token]) -> Option<usize>;
}

/// Keyword first-occurrence relative-position projection.
#[derive(Clone, Debug)]
pub struct PositionProjection {
    pub keyword: Vec<Token>,
    pub n_bins: usize,
}

impl Projection for PositionProjection {
    fn n_bins(&self) -> usize {
        self.n_bins
    }
    fn bin_of(&self, tokens: &[Token]) -> Option<usize> {
        let content_len = tokens.iter().take_while(|t| !t.is_eos()).count();
        first_occurrence_bin(&tokens[..content_len], &self.keyword, self.n_bins)
    }
}

/// Projection by an arbitrary function, for tests and ad-hoc partitions.
pub struct FnProjection<F: Fn(&[Token]) -> Option<usize>> {
    pub n_bins: usize,
    pub f: F,
}

impl<F: Fn(&[Token]) -> Option<usize>> Projection for FnProjection<F> {
    fn n_bins(&self) -> usize {
        self.n_bins
    }
    fn bin_of(&self, tokens: &[Token]) -> Option<usize> {
        (self.f)(tokens)
    }
}

/// Exact push-forward of a table through a projection. Errors when any
/// positive-mass sequence is outside the projection's domain.
pub fn pushforward(table: &DistTable, proj: &dyn Projection) -> Result<Vec<f64>, MetricsError> {
    let mut bins = vec![CompensatedSum::new(); proj.n_bins()];
    for (seq, p) in table.iter() {
        if p <= 0.0 {
            continue;
        }
        match proj.bin_of(seq.tokens()) {
            Some(b) => bins[b].add(p),
            None => {
                return Err(MetricsError::InvalidInput(format!(
                    "sequence {seq:?} has no bin under the projection"
                )))
            }
        }
    }
    Ok(bins.into_iter().map(|b| b.value()).collect())
}

/// KL between the push-forwards of two tables. By the data processing
/// inequality this lower-bounds the full KL(p‖q); +inf when a p-bin has
/// mass where the q-bin is empty.
pub fn projected_kl(p: &DistTable, q: &DistTable, proj: &dyn Projection) -> Result<f64, MetricsError> {
    let pb = pushforward(p, proj)?;
    let qb = pushforward(q, proj)?;
    let mut sum = CompensatedSum::new();
    for (pp, qq) in pb.iter().zip(qb.iter()) {
        let t = kl_term(
            *pp,
            if *pp > 0.0 { pp.ln() } else { f64::NEG_INFINITY },
            *qq,
            if *qq > 0.0 { qq.ln() } else { f64::NEG_INFINITY },
        );
        if t.is_infinite() {
            return Ok(f64::INFINITY);
        }
        sum.add(t);
    }
    Ok(sum.value())
}
