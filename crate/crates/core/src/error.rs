use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A softmax row had every column masked with negative infinity.
    #[error("degenerate mask: row {row} has no available column")]
    DegenerateMask { row: usize },

    #[error("no modality available: at least one of FLAIR, T1c, T1, T2 must be present")]
    NoModality,

    #[error("configuration error for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("numeric instability in {op}: {detail}")]
    NumericInstability { op: String, detail: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NumericInstability { .. })
    }
}
