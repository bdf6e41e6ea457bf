//! Bundled desk-scale scenarios.
//!
//! Each scenario pairs a base model with a constraint in the
//! hard-to-satisfy regime. The corpora behind the n-gram fits are
//! synthesized deterministically from hand-specified transition matrices
//! with fixed stream labels, so every build of the crate carries byte-
//! identical scenario data.

use crate::constraints::{ConstraintPredicate, Scorer};
use crate::error::ModelError;
use crate::model::{ArModel, SequenceModel};
use crate::rng::RngStream;
use crate::training::CapHint;
use crate::vocab::{Token, Vocab, EOS};

/// Master seed for corpus synthesis; fixed so scenario data never drifts.
const CORPUS_MASTER_SEED: u64 = 0x6761_7264_6c61_6221;

/// A ready-to-run experimental instance.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub base: ArModel,
    pub predicate: ConstraintPredicate,
    pub cap_hint: CapHint,
    /// Keyword run for positional metrics, when the constraint has one.
    pub keyword: Option<Vec<Token>>,
    /// The synthetic corpus the base was fitted on, when n-gram based.
    pub corpus: Option<Vec<Vec<Token>>>,
}

impl Scenario {
    pub fn by_name(name: &str) -> Result<Scenario, ModelError> {
        match name {
            "keyword-desk" => keyword_desk(),
            "sentiment-desk" => sentiment_desk(),
            "independent-control" => independent_control(),
            other => Err(ModelError::InvalidModel(format!("unknown scenario {other:?}"))),
        }
    }

    /// Corpus as token-name lines, for artifact export.
    pub fn corpus_text(&self) -> Option<String> {
        self.corpus.as_ref().map(|lines| {
            let mut out = String::new();
            for line in lines {
                out.push_str(&self.base.vocab().render_tokens(line));
                out.push('\n');
            }
            out
        })
    }
}

/// Ancestral sampling from a hand-specified token-to-token matrix.
/// Row 0 is the start distribution; row i>0 conditions on token i. Rows are
/// normalized here, so the hand-written rows only need to be proportions.
fn synthesize_corpus(
    vocab: &Vocab,
    rows: &[Vec<f64>],
    lines: usize,
    max_len: usize,
    stream_label: &str,
) -> Vec<Vec<Token>> {
    let normalized: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|&x| x / s).collect()
        })
        .collect();
    let mut rng = RngStream::derive(CORPUS_MASTER_SEED, stream_label);
    let mut corpus = Vec::with_capacity(lines);
    for _ in 0..lines {
        let mut line: Vec<Token> = Vec::new();
        loop {
            let row = match line.last() {
                None => &normalized[0],
                Some(t) => &normalized[t.index()],
            };
            let idx = rng.choose_weighted(row);
            if idx == EOS.index() {
                if line.is_empty() {
                    continue; // nonempty lines only
                }
                break;
            }
            line.push(Token(idx as u16));
            if line.len() >= max_len {
                break;
            }
        }
        corpus.push(line);
    }
    let _ = vocab;
    corpus
}

/// The default hard-constraint scenario: 6 content tokens plus EOS, an
/// order-2 base fitted on a synthetic corpus with strong bigram structure,
/// L_max = 8, and a contains-keyword constraint whose exact Z lands in the
/// low-percent range. The keyword `z` is rare and mostly reachable through
/// its precursor `e`, which is what makes per-step heuristics diverge from
/// the gold conditioning.
pub fn keyword_desk() -> Result<Scenario, ModelError> {
    let vocab = Vocab::new(&["a", "b", "c", "d", "e", "z"])?;
    // Columns: [<eos>, a, b, c, d, e, z]; row 0 is the start state.
    let rows: Vec<Vec<f64>> = vec![
        vec![0.000, 0.315, 0.252, 0.203, 0.225, 0.00178, 0.00076],
        vec![0.100, 0.052, 0.403, 0.252, 0.1882, 0.00167, 0.00076],
        vec![0.120, 0.352, 0.041, 0.302, 0.1831, 0.00076, 0.00020],
        vec![0.150, 0.252, 0.302, 0.052, 0.2389, 0.00183, 0.00076],
        vec![0.140, 0.302, 0.252, 0.252, 0.0515, 0.00076, 0.00051],
        vec![0.100, 0.120, 0.100, 0.080, 0.100, 0.000, 0.500],
        vec![0.100, 0.300, 0.250, 0.200, 0.120, 0.030, 0.000],
    ];
    let l_max = 8;
    let corpus = synthesize_corpus(&vocab, &rows, 4000, l_max - 1, "corpus/keyword-desk");
    let base = ArModel::fit_ngram(vocab.clone(), l_max, 2, &corpus)?;
    let z_tok = vocab.token("z").expect("z in vocab");
    Ok(Scenario {
        name: "keyword-desk".into(),
        base,
        predicate: ConstraintPredicate::ContainsKeyword(vec![z_tok]),
        cap_hint: CapHint { boost: vec![z_tok], deactivate_after: Some(vec![z_tok]) },
        keyword: Some(vec![z_tok]),
        corpus: Some(corpus),
    })
}

/// Conditional-generation scenario: every corpus line opens with the
/// negative-analog tokens `n n`, and the constraint demands a positive
/// final window (at least one `p`, no `n`, in the last three content
/// tokens) on top of the required opening.
pub fn sentiment_desk() -> Result<Scenario, ModelError> {
    let vocab = Vocab::new(&["n", "p", "u", "v", "w"])?;
    // Columns: [<eos>, n, p, u, v, w].
    let rows: Vec<Vec<f64>> = vec![
        vec![0.000, 1.000, 0.000, 0.000, 0.000, 0.000],
        vec![0.020, 0.350, 0.010, 0.260, 0.200, 0.160],
        vec![0.300, 0.020, 0.180, 0.200, 0.150, 0.150],
        vec![0.150, 0.030, 0.025, 0.085, 0.400, 0.310],
        vec![0.160, 0.025, 0.030, 0.330, 0.075, 0.380],
        vec![0.170, 0.030, 0.020, 0.390, 0.310, 0.080],
    ];
    let l_max = 8;
    let mut corpus = synthesize_corpus(&vocab, &rows, 4000, l_max - 1, "corpus/sentiment-desk");
    // Impose the negative opening on every line (the row for `n` keeps the
    // second token n half the time; force the analog's two-token opening).
    let n_tok = vocab.token("n").expect("n in vocab");
    for line in corpus.iter_mut() {
        if line.len() < 2 {
            line.resize(2, n_tok);
        }
        line[0] = n_tok;
        line[1] = n_tok;
    }
    let base = ArModel::fit_ngram(vocab.clone(), l_max, 2, &corpus)?;
    let p_tok = vocab.token("p").expect("p in vocab");
    let scorer = Scorer::TokenRatio {
        positive: [p_tok].into(),
        negative: [n_tok].into(),
        window: 3,
    };
    let predicate = ConstraintPredicate::Conjunction(vec![
        ConstraintPredicate::PrefixRequired(vec![n_tok, n_tok]),
        ConstraintPredicate::ThresholdScore { scorer, tau: 0.9 },
    ]);
    Ok(Scenario {
        name: "sentiment-desk".into(),
        base,
        predicate,
        cap_hint: CapHint { boost: vec![p_tok], deactivate_after: Some(vec![p_tok]) },
        keyword: Some(vec![p_tok]),
        corpus: Some(corpus),
    })
}

/// Per-step-independent control with fixed length: position-dependent
/// conditionals, no token-to-token dependence, EOS masked until the cap.
/// On this family the per-step avoidance heuristic factorizes and equals
/// the gold model exactly.
pub fn independent_control() -> Result<Scenario, ModelError> {
    let vocab = Vocab::new(&["a", "b", "c"])?;
    let dists = vec![
        vec![0.0, 0.5, 0.3, 0.2],
        vec![0.0, 0.4, 0.35, 0.25],
        vec![0.0, 0.45, 0.25, 0.3],
        vec![0.0, 0.5, 0.3, 0.2],
    ];
    let base = ArModel::per_step(vocab.clone(), dists)?;
    let c_tok = vocab.token("c").expect("c in vocab");
    Ok(Scenario {
        name: "independent-control".into(),
        base,
        predicate: ConstraintPredicate::AvoidsKeyword(vec![c_tok]),
        cap_hint: CapHint { boost: vec![], deactivate_after: None },
        keyword: Some(vec![c_tok]),
        corpus: None,
    })
}
