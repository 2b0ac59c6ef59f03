use thiserror::Error;

/// Errors raised by the estimators and their helpers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    Asymmetric { asymmetry: f64 },

    #[error("covariance is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("innovation covariance is singular at time index {k}")]
    SingularInnovation { k: usize },

    #[error("non-finite value in {what} at time index {k}{}", index_suffix(*.index))]
    NonFinite {
        what: &'static str,
        k: usize,
        index: Option<usize>,
    },

    #[error("particle weights degenerated at time index {k}: {detail}")]
    WeightDegeneracy { k: usize, detail: String },

    #[error("particle weights are not normalized (sum {sum})")]
    UnnormalizedWeights { sum: f64 },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("sample store needs {requested} bytes, budget is {budget} bytes")]
    Capacity { requested: usize, budget: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

fn index_suffix(index: Option<usize>) -> String {
    match index {
        Some(i) => format!(", index {i}"),
        None => String::new(),
    }
}

impl EstimationError {
    pub(crate) fn dim(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Self::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for failures of the numerics (as opposed to bad input or configuration).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NotPositiveSemidefinite { .. }
                | Self::SingularInnovation { .. }
                | Self::NonFinite { .. }
                | Self::WeightDegeneracy { .. }
                | Self::UnnormalizedWeights { .. }
        )
    }
}

pub type Result<T, E = EstimationError> = std::result::Result<T, E>;
