use thiserror::Error;

pub type Result<T, E = ServerError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Core(#[from] synchrodaq_core::Error),

    #[error("illegal transition: {0}")]
    Phase(String),

    #[error("unknown stream `{0}`")]
    UnknownStream(String),

    #[error("stream `{stream}` carries {expected} samples, got {found}")]
    ModalityMismatch {
        stream: String,
        expected: &'static str,
        found: &'static str,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl ServerError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        ServerError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        ServerError::Protocol(msg.into())
    }
}
