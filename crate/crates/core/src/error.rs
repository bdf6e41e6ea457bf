//! Error types, one enum per functional area.

use thiserror::Error;

use crate::samplers::SamplerReport;

/// Errors from model construction, evaluation and enumeration.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid prefix: {0}")]
    InvalidPrefix(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("enumeration budget exceeded: more than {budget} support sequences")]
    EnumerationTooLarge { budget: usize },
    #[error("dead end: every positive-probability token is banned after '{context}'")]
    DeadEnd { context: String },
    #[error("model i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("model parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Errors from filtered-model (gold) construction and checks.
#[derive(Debug, Error)]
pub enum GoldError {
    #[error("empty gold support: no constraint-satisfying sequence has positive base mass")]
    EmptyGoldSupport,
    #[error("distribution violates the constraint or escapes the base support: {0}")]
    ConstraintViolatingInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors from the guaranteed samplers.
#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("draw budget exhausted after {} draws without an accepted sample", report.draws)]
    DrawBudgetExhausted { report: SamplerReport },
    #[error("invalid sampler parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors from proposal training.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("degenerate dataset: no accepted samples to fit on")]
    DegenerateDataset,
    #[error("training diverged: KL(g||policy) = {kl} after {samples} samples, more than 10x the initial {initial}")]
    Diverged { kl: f64, initial: f64, samples: u64 },
    #[error("invalid training parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Gold(#[from] GoldError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors from metric computation.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid metric input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Gold(#[from] GoldError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors from config parsing and validation.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Invalid(String),
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Harness-level errors, mapped onto CLI exit codes.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// Exit code 2.
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// Exit code 3.
    #[error("draw budget exhausted: {0}")]
    Budget(String),
    /// Exit code 4.
    #[error("guarantee audit failed: {0}")]
    Audit(String),
    #[error("run failed: {0}")]
    Run(String),
    #[error("artifact i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// CLI exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Budget(_) => 3,
            HarnessError::Audit(_) => 4,
            _ => 1,
        }
    }
}

impl From<SamplerError> for HarnessError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::DrawBudgetExhausted { report } => HarnessError::Budget(format!(
                "no accepted sample within {} draws (stream {})",
                report.draws, report.stream
            )),
            other => HarnessError::Run(other.to_string()),
        }
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        HarnessError::Run(e.to_string())
    }
}

impl From<GoldError> for HarnessError {
    fn from(e: GoldError) -> Self {
        HarnessError::Run(e.to_string())
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        HarnessError::Run(e.to_string())
    }
}

impl From<MetricsError> for HarnessError {
    fn from(e: MetricsError) -> Self {
        HarnessError::Run(e.to_string())
    }
}
