use lvm_infer_core::simulation::SimulationError;
use lvm_infer_core::{CorrectionError, DataError, FitError, InferenceError, SpecError};
use std::fmt;

/// Failure classes; each maps to one process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, model text or contrast expressions.
    Usage(String),
    /// Estimation, correction or testing failed; the message carries the status.
    Numerical(String),
    /// Files could not be read, parsed as CSV or written.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<SpecError> for CliError {
    fn from(e: SpecError) -> Self {
        CliError::Usage(format!("model: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Dimension { .. } => CliError::Usage(e.to_string()),
            FitError::SingularInformation { .. } => CliError::Numerical(format!("singular-information: {e}")),
            _ => CliError::Numerical(format!("fit-error: {e}")),
        }
    }
}

impl From<CorrectionError> for CliError {
    fn from(e: CorrectionError) -> Self {
        CliError::Numerical(format!("correction-error: {e}"))
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Contrast(_) | InferenceError::ClusterLength { .. } | InferenceError::ZeroContrast => {
                CliError::Usage(e.to_string())
            }
            InferenceError::Correction(c) => c.into(),
            _ => CliError::Numerical(format!("test-error: {e}")),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::InvalidStudy(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}
