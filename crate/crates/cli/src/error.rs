use std::fmt;

use stainforge_core::Error as CoreError;

/// Exit code 2 for bad input or configuration, 1 for failures at run time.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InvalidConfig(_)
            | CoreError::InvalidImage(_)
            | CoreError::ShapeMismatch(_)
            | CoreError::ImageTooSmall { .. }
            | CoreError::InsufficientCenters(_)
            | CoreError::SingleDomain(_)
            | CoreError::SampleTooSmall { .. }
            | CoreError::EmptyDataset(_)
            | CoreError::Format(_)
            | CoreError::Json(_) => CliError::Validation(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(format!("config: {e}"))
    }
}
