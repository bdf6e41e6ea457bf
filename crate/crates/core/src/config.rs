//! Experiment configuration: a line-oriented `key = value` file with
//! section headers (TOML), resolved into runnable pieces.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintPredicate, Scorer};
use crate::error::ConfigError;
use crate::model::{ArModel, SequenceModel};
use crate::scenario::Scenario;
use crate::training::{CapHint, PolicyFamily};
use crate::vocab::{Token, Vocab};

/// Environment variable overriding the artifact output root.
pub const OUTPUT_ROOT_ENV: &str = "GUARDGEN_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub constraint: Option<ConstraintSpec>,
    #[serde(default)]
    pub trainer: TrainerSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub metrics: MetricsSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Bundled scenario name; fills model and constraint unless overridden.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    /// "ngram" or "tabular" for custom models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_max: Option<usize>,
    /// Content token names (EOS is implicit).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    /// Corpus file (one token-name line per sequence) for n-gram fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_file: Option<String>,
    /// Serialized model file, as written by the model text format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    /// contains-keyword | avoids-keyword | prefix-required | threshold-score
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_prefix: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSpec {
    /// Any of: "sft", "dpg", "warm-dpg".
    pub methods: Vec<String>,
    /// Total proposal-sample budget per method (equal across methods).
    pub budget: u64,
    /// CAP-phase budget inside warm-start DPG.
    pub cap_budget: u64,
    /// DPG logit step size.
    pub alpha: f64,
    pub samples_per_step: u64,
    /// Logit bias magnitude of the CAP proposal.
    pub cap_bias: f64,
    /// Number of paired seeds.
    pub seeds: u32,
    /// "tabular" or "ngram".
    pub policy_family: String,
    pub policy_order: usize,
    /// Cross-entropy fit iteration cap (SFT and the warm phase).
    pub fit_steps: usize,
    /// Cross-entropy fit step size.
    pub fit_alpha: f64,
    /// Pseudo-counts shrinking fit targets toward the pre-fit policy.
    pub fit_prior_count: f64,
}

impl Default for TrainerSpec {
    fn default() -> Self {
        TrainerSpec {
            methods: vec!["sft".into(), "dpg".into(), "warm-dpg".into()],
            budget: 200_000,
            cap_budget: 40_000,
            alpha: 1.5,
            samples_per_step: 1000,
            cap_bias: 3.5,
            seeds: 3,
            policy_family: "ngram".into(),
            policy_order: 4,
            fit_steps: 4000,
            fit_alpha: 2.0,
            fit_prior_count: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    /// guard | qrs | imh (for the `sample` subcommand).
    pub method: String,
    /// base | cap | file (proposal source for sampling/report commands).
    pub proposal: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposal_file: Option<String>,
    /// QRS acceptance scale, as a multiple of the proposal's exact Z'.
    pub beta_over_zprime: f64,
    /// IMH steps per emitted sample.
    pub imh_steps: u64,
    /// Samples requested by the `sample` subcommand.
    pub n_samples: usize,
    /// Draw budget per requested sample.
    pub draw_budget: u64,
    /// QRS sweep upper range: β = Z'·2^k for k up to this.
    pub qrs_sweep_doublings: u32,
    /// QRS sweep lower range: the grid starts at k = this (negative values
    /// reach below Z', toward the plain rejection sampler).
    pub qrs_sweep_start_exp: i32,
    /// IMH sweep: n = 2^k for k in 0..=this.
    pub imh_sweep_doublings: u32,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            method: "guard".into(),
            proposal: "base".into(),
            proposal_file: None,
            beta_over_zprime: 1.0,
            imh_steps: 16,
            n_samples: 100,
            draw_budget: crate::samplers::DEFAULT_DRAW_BUDGET,
            qrs_sweep_doublings: 10,
            qrs_sweep_start_exp: -6,
            imh_sweep_doublings: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSpec {
    pub n_bins: usize,
    pub self_bleu_k: usize,
    /// Gold samples for the KL(g‖g') estimator validation.
    pub estimator_samples: usize,
    /// Enumeration cap for all exact computations.
    pub enum_budget: usize,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        MetricsSpec {
            n_bins: 10,
            self_bleu_k: 100,
            estimator_samples: 5000,
            enum_budget: crate::model::DEFAULT_ENUM_BUDGET,
        }
    }
}

/// Fully resolved experiment: models and predicates built, tokens checked.
#[derive(Clone, Debug)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub name: String,
    pub base: ArModel,
    pub predicate: ConstraintPredicate,
    pub cap_hint: CapHint,
    pub keyword: Option<Vec<Token>>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Field-level validation that does not need the model built.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.output_dir.is_empty() {
            return Err(ConfigError::Invalid("output_dir must not be empty".into()));
        }
        if self.trainer.budget == 0 {
            return Err(ConfigError::Invalid("trainer.budget must be positive".into()));
        }
        if self.trainer.cap_budget > self.trainer.budget {
            return Err(ConfigError::Invalid(format!(
                "trainer.cap_budget {} exceeds trainer.budget {}",
                self.trainer.cap_budget, self.trainer.budget
            )));
        }
        if self.trainer.seeds == 0 {
            return Err(ConfigError::Invalid("trainer.seeds must be positive".into()));
        }
        if self.trainer.samples_per_step == 0 {
            return Err(ConfigError::Invalid("trainer.samples_per_step must be positive".into()));
        }
        let known = ["sft", "dpg", "warm-dpg"];
        for m in &self.trainer.methods {
            if !known.contains(&m.as_str()) {
                return Err(ConfigError::Invalid(format!(
                    "trainer.methods entry {m:?}; expected one of {known:?}"
                )));
            }
        }
        if self.trainer.methods.is_empty() {
            return Err(ConfigError::Invalid("trainer.methods must not be empty".into()));
        }
        match self.trainer.policy_family.as_str() {
            "tabular" | "ngram" => {}
            other => {
                return Err(ConfigError::Invalid(format!(
                    "trainer.policy_family {other:?}; expected tabular or ngram"
                )))
            }
        }
        match self.sampler.method.as_str() {
            "guard" | "qrs" | "imh" => {}
            other => {
                return Err(ConfigError::Invalid(format!(
                    "sampler.method {other:?}; expected guard, qrs or imh"
                )))
            }
        }
        match self.sampler.proposal.as_str() {
            "base" | "cap" | "file" => {}
            other => {
                return Err(ConfigError::Invalid(format!(
                    "sampler.proposal {other:?}; expected base, cap or file"
                )))
            }
        }
        if self.sampler.proposal == "file" && self.sampler.proposal_file.is_none() {
            return Err(ConfigError::Invalid(
                "sampler.proposal = \"file\" requires sampler.proposal_file".into(),
            ));
        }
        if self.sampler.n_samples == 0 || self.sampler.draw_budget == 0 {
            return Err(ConfigError::Invalid(
                "sampler.n_samples and sampler.draw_budget must be positive".into(),
            ));
        }
        if self.metrics.n_bins == 0 {
            return Err(ConfigError::Invalid("metrics.n_bins must be positive".into()));
        }
        if self.metrics.self_bleu_k < 2 {
            return Err(ConfigError::Invalid("metrics.self_bleu_k must be at least 2".into()));
        }
        Ok(())
    }

    pub fn policy_family(&self) -> PolicyFamily {
        match self.trainer.policy_family.as_str() {
            "ngram" => PolicyFamily::Ngram { order: self.trainer.policy_order },
            _ => PolicyFamily::TabularFullContext,
        }
    }

    fn parse_tokens(vocab: &Vocab, names: &[String], what: &str) -> Result<Vec<Token>, ConfigError> {
        names
            .iter()
            .map(|n| {
                vocab.token(n).ok_or_else(|| {
                    ConfigError::Invalid(format!("{what}: token {n:?} not in the vocabulary"))
                })
            })
            .collect()
    }

    fn build_constraint(
        spec: &ConstraintSpec,
        vocab: &Vocab,
    ) -> Result<(ConstraintPredicate, CapHint, Option<Vec<Token>>), ConfigError> {
        match spec.kind.as_str() {
            "contains-keyword" | "avoids-keyword" => {
                let names = spec.keyword.as_ref().ok_or_else(|| {
                    ConfigError::Invalid(format!("constraint.kind {:?} requires constraint.keyword", spec.kind))
                })?;
                if names.is_empty() {
                    return Err(ConfigError::Invalid("constraint.keyword must not be empty".into()));
                }
                let kw = Self::parse_tokens(vocab, names, "constraint.keyword")?;
                let (pred, hint) = if spec.kind == "contains-keyword" {
                    (
                        ConstraintPredicate::ContainsKeyword(kw.clone()),
                        CapHint { boost: kw.clone(), deactivate_after: Some(kw.clone()) },
                    )
                } else {
                    (
                        ConstraintPredicate::AvoidsKeyword(kw.clone()),
                        CapHint { boost: vec![], deactivate_after: None },
                    )
                };
                Ok((pred, hint, Some(kw)))
            }
            "prefix-required" => {
                let names = spec.required_prefix.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("prefix-required needs constraint.required_prefix".into())
                })?;
                let prefix = Self::parse_tokens(vocab, names, "constraint.required_prefix")?;
                Ok((
                    ConstraintPredicate::PrefixRequired(prefix.clone()),
                    CapHint { boost: vec![], deactivate_after: None },
                    Some(prefix),
                ))
            }
            "threshold-score" => {
                let tau = spec.tau.ok_or_else(|| {
                    ConfigError::Invalid("threshold-score needs constraint.tau".into())
                })?;
                let window = spec.window.unwrap_or(3);
                let pos_names = spec.positive.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("threshold-score needs constraint.positive".into())
                })?;
                let neg_names = spec.negative.clone().unwrap_or_default();
                let positive: BTreeSet<Token> =
                    Self::parse_tokens(vocab, pos_names, "constraint.positive")?.into_iter().collect();
                let negative: BTreeSet<Token> =
                    Self::parse_tokens(vocab, &neg_names, "constraint.negative")?.into_iter().collect();
                let boost: Vec<Token> = positive.iter().copied().collect();
                let scorer = Scorer::TokenRatio { positive, negative, window };
                Ok((
                    ConstraintPredicate::ThresholdScore { scorer, tau },
                    CapHint {
                        boost: boost.clone(),
                        deactivate_after: if boost.len() == 1 { Some(boost) } else { None },
                    },
                    None,
                ))
            }
            other => Err(ConfigError::Invalid(format!(
                "constraint.kind {other:?}; expected contains-keyword, avoids-keyword, prefix-required or threshold-score"
            ))),
        }
    }

    /// Build the runnable experiment: scenario or custom model, plus the
    /// constraint (a scenario's constraint can be overridden by an explicit
    /// [constraint] section).
    pub fn resolve(&self) -> Result<ResolvedExperiment, ConfigError> {
        self.validate()?;
        let (name, base, mut predicate, mut cap_hint, mut keyword) =
            if let Some(scn) = &self.model.scenario {
                let s = Scenario::by_name(scn).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                (s.name, s.base, Some(s.predicate), Some(s.cap_hint), s.keyword)
            } else {
                let base = self.build_custom_model()?;
                ("custom".to_string(), base, None, None, None)
            };
        if let Some(spec) = &self.constraint {
            let (p, h, kw) = Self::build_constraint(spec, base.vocab())?;
            predicate = Some(p);
            cap_hint = Some(h);
            keyword = kw;
        }
        let predicate = predicate.ok_or_else(|| {
            ConfigError::Invalid("no constraint: set model.scenario or a [constraint] section".into())
        })?;
        let cap_hint = cap_hint.unwrap_or(CapHint { boost: vec![], deactivate_after: None });
        Ok(ResolvedExperiment {
            config: self.clone(),
            name,
            base,
            predicate,
            cap_hint,
            keyword,
        })
    }

    fn build_custom_model(&self) -> Result<ArModel, ConfigError> {
        let m = &self.model;
        if let Some(path) = &m.model_file {
            return ArModel::load(Path::new(path)).map_err(|e| ConfigError::Invalid(e.to_string()));
        }
        let family = m.family.as_deref().ok_or_else(|| {
            ConfigError::Invalid("model: set scenario, model_file, or family+vocab+corpus_file".into())
        })?;
        let vocab_names = m.vocab.as_ref().ok_or_else(|| {
            ConfigError::Invalid("custom model requires model.vocab (content token names)".into())
        })?;
        let refs: Vec<&str> = vocab_names.iter().map(String::as_str).collect();
        let vocab = Vocab::new(&refs).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let l_max = m.l_max.ok_or_else(|| ConfigError::Invalid("custom model requires model.l_max".into()))?;
        match family {
            "ngram" => {
                let order = m.order.unwrap_or(2);
                let corpus_path = m.corpus_file.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("ngram model requires model.corpus_file".into())
                })?;
                let text = std::fs::read_to_string(corpus_path)?;
                let mut corpus = Vec::new();
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let toks = vocab.parse_tokens(line).map_err(|e| {
                        ConfigError::Invalid(format!("{corpus_path}:{}: {e}", i + 1))
                    })?;
                    corpus.push(toks);
                }
                ArModel::fit_ngram(vocab, l_max, order, &corpus)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))
            }
            other => Err(ConfigError::Invalid(format!(
                "model.family {other:?}; expected \"ngram\" (or use model_file/scenario)"
            ))),
        }
    }
}
