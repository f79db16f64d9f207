use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input, configuration or file; exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Training diverged or a numeric check failed; exit code 2.
    #[error("{0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Validation(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl From<sarfusion::train::TrainError> for CliError {
    fn from(e: sarfusion::train::TrainError) -> Self {
        use sarfusion::train::TrainError;
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(format!("train: {e}")),
            TrainError::Nn(sarnn::NnError::NonFiniteGradient { .. }) => CliError::Numeric(format!("train: {e}")),
            _ => CliError::Validation(format!("train: {e}")),
        }
    }
}

impl From<sarfusion::workflow::WorkflowError> for CliError {
    fn from(e: sarfusion::workflow::WorkflowError) -> Self {
        use sarfusion::workflow::WorkflowError;
        match e {
            WorkflowError::Descriptor { .. } => CliError::Numeric(format!("nsjsm: {e}")),
            _ => CliError::Validation(format!("pipeline: {e}")),
        }
    }
}

impl From<sarfusion::pipeline::PipelineError> for CliError {
    fn from(e: sarfusion::pipeline::PipelineError) -> Self {
        CliError::Validation(format!("pipeline: {e}"))
    }
}

impl From<sarfusion::fusion::FusionError> for CliError {
    fn from(e: sarfusion::fusion::FusionError) -> Self {
        CliError::Validation(format!("fusion: {e}"))
    }
}

impl From<sarfusion::nsjsm::NsjsmError> for CliError {
    fn from(e: sarfusion::nsjsm::NsjsmError) -> Self {
        CliError::Validation(format!("nsjsm: {e}"))
    }
}
