use stcast_core::forecast::ForecastError;
use stcast_core::infer::InferError;
use stcast_core::model::ModelError;
use stcast_core::panel::PanelError;
use stcast_core::simulate::SimError;
use stcast_core::structures::StructureError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<PanelError> for CliError {
    fn from(e: PanelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<StructureError> for CliError {
    fn from(e: StructureError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidSpec(_)
            | ModelError::MissingProximity(_)
            | ModelError::ProximityKindMismatch { .. }
            | ModelError::MissingCovariate(_)
            | ModelError::AutoregressiveLagZero
            | ModelError::WindowOutsidePanel(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<InferError> for CliError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::Model(m) => m.into(),
            InferError::Bundle(_) | InferError::Io(_) => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ForecastError> for CliError {
    fn from(e: ForecastError) -> Self {
        match e {
            ForecastError::Horizon { .. } => CliError::Config(e.to_string()),
            ForecastError::Infer(i) => i.into(),
            ForecastError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Invalid(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
