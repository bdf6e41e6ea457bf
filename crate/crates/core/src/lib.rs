//! Desk-scale laboratory for guaranteed generation from autoregressive
//! sequence models.
//!
//! Everything here runs over finite vocabularies with a hard length cap, so
//! the whole sequence space is enumerable and every quantity that is only
//! estimable at LLM scale — partition functions, KL divergences, sampler
//! output laws — has an exact counterpart computed by enumeration.
//!
//! The crate is organized around the filtered-model pipeline:
//!
//! * [`model`] — finite autoregressive models (tabular, n-gram, composed),
//!   ancestral sampling, exact support enumeration;
//! * [`constraints`] — binary predicates `b` over sequences;
//! * [`gold`] — the filtered distribution `g ∝ a·b`, its partition function
//!   and information-geometry identities;
//! * [`samplers`] — guaranteed samplers (rejection, QRS, IMH) and the two
//!   heuristic constrained samplers, each with an exact-law companion;
//! * [`training`] — proposal fitting: logit-bias CAP, SFT, DPG and
//!   warm-start DPG;
//! * [`metrics`] — divergence reports, estimators, Self-BLEU, positional
//!   histograms, projected KL;
//! * [`harness`] — config-driven experiment runners emitting CSV/JSON
//!   artifacts with full seed reproducibility.

pub mod config;
pub mod constraints;
pub mod dist;
pub mod error;
pub mod gold;
pub mod harness;
pub mod metrics;
pub mod model;
mod num;
pub mod rng;
pub mod samplers;
pub mod scenario;
pub mod sequence;
pub mod training;
pub mod vocab;

pub use constraints::{satisfying_mass, ConstraintPredicate, Scorer};
pub use dist::DistTable;
pub use error::{GoldError, HarnessError, MetricsError, ModelError, SamplerError, TrainError};
pub use gold::{exact_kl, exact_kl_vs_model, FilteredModel};
pub use model::{
    apply_logit_bias, apply_token_mask, enumerate_support, sample_sequence, sequence_logprob,
    ArModel, DeactivationRule, SequenceModel,
};
pub use rng::RngStream;
pub use sequence::Sequence;
pub use vocab::{Token, Vocab, EOS};
