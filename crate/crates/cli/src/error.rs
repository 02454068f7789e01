use std::fmt;

/// Exit status contract: 0 success, 2 usage or configuration, 3 refusal,
/// 4 runtime failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Refused(String),
    Runtime(anyhow::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Refused(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Refused(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

macro_rules! runtime_from {
    ($($t:ty),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.into())
            }
        })*
    };
}

runtime_from!(
    std::io::Error,
    serde_json::Error,
    affectlm::data::DataError,
    affectlm::decode::DecodeError,
    affectlm::metrics::EvalError,
    affectlm::metrics::MetricsError,
    affectlm::model::ModelError,
);

impl From<affectlm::tokenizer::TokenizerError> for CliError {
    fn from(e: affectlm::tokenizer::TokenizerError) -> Self {
        match e {
            affectlm::tokenizer::TokenizerError::VocabTooSmall { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<affectlm::train::TrainError> for CliError {
    fn from(e: affectlm::train::TrainError) -> Self {
        match e {
            affectlm::train::TrainError::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Runtime(other.into()),
        }
    }
}
