use std::path::PathBuf;

/// Errors produced across the grounding pipeline.
///
/// The `Display` text of each variant starts with a stable category prefix
/// (`shape error:`, `format error:`, ...) which the command-line front end
/// passes through unchanged.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error: {what}")]
    Format { what: String },

    #[error("format error: {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing file: {}: {source}", path.display())]
    MissingFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("id mismatch: missing predictions {missing:?}, duplicate predictions {duplicate:?}, unknown predictions {unknown:?}")]
    IdMismatch {
        missing: Vec<String>,
        duplicate: Vec<String>,
        unknown: Vec<String>,
    },

    #[error("training diverged: non-finite loss at step {step} (lr {lr:e})")]
    NonFiniteLoss { step: usize, lr: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(what: impl Into<String>) -> Self {
        Error::Format { what: what.into() }
    }

    pub(crate) fn invalid(what: impl Into<String>) -> Self {
        Error::InvalidInput(what.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

/// Opens a file, mapping "not found" style failures to [`Error::MissingFile`].
pub(crate) fn open(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|source| Error::MissingFile {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a whole text file, mapping open failures to [`Error::MissingFile`].
pub fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::MissingFile {
        path: path.to_path_buf(),
        source,
    })
}
