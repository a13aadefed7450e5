use thiserror::Error;
use vla_core::dataset::DatasetError;
use vla_core::eval::EvalError;
use vla_core::model::ModelError;
use vla_core::teacher::TeacherError;
use vla_core::train::TrainError;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("partial failure: {0}")]
    Partial(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Partial(_) => 4,
            CliError::Divergence(_) => 5,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let m = e.to_string();
        match e {
            DatasetError::Vocab(_) | DatasetError::Consistency(_) | DatasetError::Size { .. } | DatasetError::Sim(_) => {
                CliError::Config(m)
            }
            DatasetError::Version { .. } | DatasetError::MalformedLine { .. } | DatasetError::Io(_) | DatasetError::Json(_) => {
                CliError::Io(m)
            }
            DatasetError::PartialOutput { .. } => CliError::Partial(m),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let m = e.to_string();
        match e {
            ModelError::Config(_) | ModelError::Length { .. } | ModelError::Span(_) => CliError::Config(m),
            ModelError::Checkpoint(_) | ModelError::Io(_) | ModelError::Json(_) => CliError::Io(m),
            ModelError::Autodiff(_) => CliError::Internal(m),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let m = e.to_string();
        match e {
            EvalError::Compatibility(_) | EvalError::Config(_) | EvalError::Sim(_) => CliError::Config(m),
            EvalError::Io(_) | EvalError::Json(_) => CliError::Io(m),
            EvalError::Model(inner) => inner.into(),
            EvalError::Episode { source, .. } => match CliError::from(*source) {
                CliError::Config(_) => CliError::Config(m),
                CliError::Io(_) => CliError::Io(m),
                _ => CliError::Internal(m),
            },
            EvalError::Metric(_) | EvalError::Plot(_) => CliError::Internal(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let m = e.to_string();
        match e {
            TrainError::Config(_) | TrainError::DegenerateBatch(_) => CliError::Config(m),
            TrainError::Divergence { .. } => CliError::Divergence(m),
            TrainError::Io(_) | TrainError::Json(_) => CliError::Io(m),
            TrainError::Model(inner) => inner.into(),
            TrainError::Dataset(inner) => inner.into(),
            TrainError::Eval(inner) => inner.into(),
            TrainError::Autodiff(_) => CliError::Internal(m),
        }
    }
}

impl From<TeacherError> for CliError {
    fn from(e: TeacherError) -> Self {
        let m = e.to_string();
        match e {
            TeacherError::Config(_) => CliError::Config(m),
            _ => CliError::Partial(m),
        }
    }
}

impl From<vla_core::sim::SimError> for CliError {
    fn from(e: vla_core::sim::SimError) -> Self {
        CliError::Config(e.to_string())
    }
}
