//! Shared helpers for the acceptance suite: random instance generation,
//! chi-square critical values, and artifact-tree comparison.

use std::collections::BTreeSet;
use std::path::Path;

use guardgen::constraints::{ConstraintPredicate, Scorer};
use guardgen::dist::DistTable;
use guardgen::gold::FilteredModel;
use guardgen::model::ArModel;
use guardgen::rng::RngStream;
use guardgen::sequence::Sequence;
use guardgen::vocab::{Token, Vocab};

pub const ENUM_BUDGET: usize = 10_000_000;

/// Exponential(1) draw for simplex sampling.
fn exp_draw(rng: &mut RngStream) -> f64 {
    let u = rng.gen_f64();
    -(1.0 - u).ln()
}

/// Dense random tabular model: every conditional is a uniform-simplex draw,
/// so every sequence has positive probability.
pub fn random_tabular(vocab: &Vocab, l_max: usize, rng: &mut RngStream) -> ArModel {
    let n = vocab.len();
    ArModel::tabular_from_fn(vocab.clone(), l_max, ENUM_BUDGET, |_ctx| {
        let mut w: Vec<f64> = (0..n).map(|_| exp_draw(rng)).collect();
        let s: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x /= s;
        }
        Ok(w)
    })
    .expect("random tabular construction")
}

/// Random small instance: dense tabular a and a', plus a random satisfiable
/// keyword or threshold constraint.
pub struct RandomInstance {
    pub vocab: Vocab,
    pub base: ArModel,
    pub proposal: ArModel,
    pub predicate: ConstraintPredicate,
}

pub fn random_instance(rng: &mut RngStream) -> RandomInstance {
    const NAMES: [&str; 4] = ["a", "b", "c", "d"];
    let content = 2 + (rng.gen_u64() % 3) as usize; // 2..=4 content tokens
    let vocab = Vocab::new(&NAMES[..content]).expect("vocab");
    let l_max = 3 + (rng.gen_u64() % 4) as usize; // 3..=6
    let base = random_tabular(&vocab, l_max, rng);
    let proposal = random_tabular(&vocab, l_max, rng);
    let predicate = loop {
        let pick = rng.gen_u64() % 4;
        let t = Token(1 + (rng.gen_u64() % content as u64) as u16);
        let cand = match pick {
            0 => ConstraintPredicate::ContainsKeyword(vec![t]),
            1 => {
                let t2 = Token(1 + (rng.gen_u64() % content as u64) as u16);
                ConstraintPredicate::ContainsKeyword(vec![t, t2])
            }
            2 => ConstraintPredicate::AvoidsKeyword(vec![t]),
            _ => {
                let t2 = Token(1 + (rng.gen_u64() % content as u64) as u16);
                let positive: BTreeSet<Token> = [t].into();
                let negative: BTreeSet<Token> = if t2 == t { BTreeSet::new() } else { [t2].into() };
                ConstraintPredicate::ThresholdScore {
                    scorer: Scorer::TokenRatio { positive, negative, window: 1 + (rng.gen_u64() % 3) as usize },
                    tau: 0.3 + 0.5 * rng.gen_f64(),
                }
            }
        };
        // Dense models put positive mass everywhere, so satisfiability of
        // the predicate on the sequence space is the only thing to check.
        if guardgen::gold::exact_partition(&base, &cand, ENUM_BUDGET).is_ok() {
            break cand;
        }
    };
    let _ = l_max;
    RandomInstance { vocab, base, proposal, predicate }
}

/// Random distribution over the gold support (a point of the constraint
/// set C), as exponential weights normalized.
pub fn random_p_in_constraint_set(
    fm: &FilteredModel<ArModel>,
    rng: &mut RngStream,
) -> DistTable {
    let entries: Vec<(Sequence, f64)> = fm
        .exact_gold()
        .iter()
        .map(|(s, _)| (s.clone(), exp_draw(rng)))
        .collect();
    DistTable::from_weights(entries).expect("random p")
}

/// Chi-square critical value at the given upper-tail significance.
pub fn chi_square_critical(dof: f64, significance: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    ChiSquared::new(dof).expect("dof").inverse_cdf(1.0 - significance)
}

/// Recursively collect (relative path, bytes) for every file under a root.
pub fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .expect("read_dir")
            .map(|e| e.expect("entry").path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("rel").to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).expect("read")));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}
