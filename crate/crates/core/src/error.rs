use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error category, used by the command-line front end to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("non-finite data")]
    NonFinite,
    #[error("size overflow: {0}")]
    SizeOverflow(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing inference threshold for {0} variant")]
    MissingThreshold(&'static str),
    #[error("variant {0} is not trainable")]
    NotTrainable(&'static str),
    #[error("degenerate threshold: no positive kept activation in any batch")]
    DegenerateThreshold,
    #[error("gradient overflow")]
    GradientOverflow,
    #[error("degenerate direction: row {index} has zero norm")]
    DegenerateDirection { index: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("undefined ROC: {0}")]
    UndefinedRoc(&'static str),
    #[error("single-class data: {0}")]
    SingleClass(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("probe training diverged")]
    ProbeDiverged,
    #[error("chat client error: {0}")]
    Client(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_)
            | Error::BadMagic
            | Error::UnsupportedVersion(_)
            | Error::UnsupportedDtype(_)
            | Error::TruncatedPayload
            | Error::TrailingBytes
            | Error::Header(_)
            | Error::Client(_) => ErrorKind::Io,
            Error::Json(_)
            | Error::InvalidConfig(_)
            | Error::DimensionMismatch { .. }
            | Error::IndexOutOfRange { .. }
            | Error::MissingThreshold(_)
            | Error::NotTrainable(_)
            | Error::SingleClass(_)
            | Error::Empty(_)
            | Error::SizeOverflow(_) => ErrorKind::Config,
            Error::NonFinite
            | Error::DegenerateThreshold
            | Error::GradientOverflow
            | Error::DegenerateDirection { .. }
            | Error::UndefinedRoc(_)
            | Error::ProbeDiverged => ErrorKind::Numeric,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
