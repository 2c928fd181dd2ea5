use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input outside the domain of an operation (shape mismatch, empty signal, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value appeared during integration or optimization.
    #[error("numerical divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },

    /// Malformed checkpoint or other binary input.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A stored tensor does not fit the configured model.
    #[error("shape mismatch for '{name}': stored {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// A synthesized training example had to be discarded (e.g. silent clean segment).
    #[error("rejected sample: {0}")]
    Rejected(String),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 0 success, 1 other I/O failure, 2 usage/config, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Domain(_)
            | Error::Format { .. }
            | Error::ShapeMismatch { .. }
            | Error::Wav(_) => 2,
            Error::Divergence { .. } => 3,
            Error::Rejected(_) | Error::Csv(_) | Error::Io(_) => 1,
        }
    }
}

pub(crate) fn ensure_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::domain(format!("{what}: shape mismatch {a:?} vs {b:?}")));
    }
    Ok(())
}
