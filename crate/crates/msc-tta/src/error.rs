use thiserror::Error;

/// Library-wide error type. The CLI maps variants to process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A metric is undefined on the given input (e.g. mIoU of an empty matrix).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Invalid or infeasible configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced non-finite values.
    #[error("training fault in cell {cell}: {detail}")]
    TrainingFault { cell: usize, detail: String },

    /// A persisted run log could not be parsed.
    #[error("malformed log at line {line}: {detail} (last valid record at line {last_valid})")]
    MalformedLog {
        line: usize,
        last_valid: usize,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Exit code for the CLI: 2 config, 3 training fault, 4 I/O or log corruption.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::TrainingFault { .. } => 3,
            Error::Io(_) | Error::MalformedLog { .. } => 4,
            Error::Contract(_) | Error::UndefinedMetric(_) => 2,
        }
    }
}
