use fscil::datagen::DatagenError;
use fscil::dsp::DspError;
use fscil::embedder::{CheckpointError, EmbedderError};
use fscil::protocol::ProtocolError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

fn dsp_is_config(e: &DspError) -> bool {
    matches!(
        e,
        DspError::InvalidConfig(_) | DspError::InvalidBand { .. } | DspError::FrameTooLong { .. } | DspError::InvalidLength(_)
    )
}

fn data_is_config(e: &DatagenError) -> bool {
    matches!(
        e,
        DatagenError::ParseError { .. }
            | DatagenError::InvalidSpec(_)
            | DatagenError::TooManyClasses { .. }
            | DatagenError::MissingFile(_)
    )
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        let validation = match &e {
            ProtocolError::InvalidConfig(_)
            | ProtocolError::InsufficientClasses { .. }
            | ProtocolError::InsufficientShots { .. }
            | ProtocolError::NoEvalData { .. } => true,
            ProtocolError::Embedder(EmbedderError::InvalidConfig(_)) => true,
            ProtocolError::Dsp(d) => dsp_is_config(d),
            ProtocolError::Data(d) => data_is_config(d),
            _ => false,
        };
        if validation {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        if data_is_config(&e) {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<DspError> for CliError {
    fn from(e: DspError) -> Self {
        if dsp_is_config(&e) {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Runtime(format!("checkpoint: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
