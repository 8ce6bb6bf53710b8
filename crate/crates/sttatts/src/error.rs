use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] sttatts_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: unsupported audio format: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("{path}: sample rate {found} Hz, expected {expected} Hz")]
    SampleRateMismatch { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),

    #[error("item {index} of length {len} exceeds the batch budget of {max_tokens}")]
    ItemTooLong { index: usize, len: usize, max_tokens: usize },

    #[error("{path}: corrupt checkpoint: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit status: 2 for usage and configuration problems, 1 for
    /// failures at run time.
    pub fn exit_code(&self) -> i32 {
        use sttatts_core::Error as C;
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::MissingFile(_) | Error::DuplicateId(_) | Error::UnsupportedFormat { .. } | Error::SampleRateMismatch { .. } => 2,
            Error::Checkpoint { .. } => 2,
            Error::Core(C::Config(_) | C::UnknownTask(_) | C::UnknownSymbol { .. } | C::TooLong { .. }) => 2,
            _ => 1,
        }
    }
}
