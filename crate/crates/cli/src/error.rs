use std::fmt;

use dualenc::autodiff::checkpoint::CheckpointError;
use dualenc::autodiff::TensorError;
use dualenc::corpus::CorpusError;
use dualenc::encoders::EncodeError;
use dualenc::evaluation::EvalError;
use dualenc::retrieval::RetrievalError;
use dualenc::taxonomy::TaxonomyError;
use dualenc::training::TrainError;

/// Failure of a subcommand, classified by exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments. Exit 2.
    Config(String),
    /// Missing, unreadable or inconsistent input data. Exit 3.
    Data(String),
    /// Non-finite values during training or a failed gradient check. Exit 4.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        CliError::Config(msg.to_string())
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        CliError::Data(msg.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Invalid(_) => CliError::config(e),
            _ => CliError::data(e),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::data(e),
        }
    }
}

impl From<EncodeError> for CliError {
    fn from(e: EncodeError) -> Self {
        match e {
            EncodeError::Config(_) => CliError::config(e),
            EncodeError::Tensor(t) => t.into(),
            _ => CliError::data(e),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::BadK => CliError::config(e),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Encode(e) => e.into(),
            TrainError::Tensor(e) => e.into(),
            TrainError::Corpus(e) => e.into(),
            _ => CliError::data(e),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::BadK => CliError::config(e),
            RetrievalError::Encode(e) => e.into(),
            _ => CliError::data(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BadEpsilon(_) => CliError::config(e),
            _ => CliError::data(e),
        }
    }
}

impl From<TaxonomyError> for CliError {
    fn from(e: TaxonomyError) -> Self {
        CliError::data(e)
    }
}
