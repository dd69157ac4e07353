use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    RootNotScalar(Vec<usize>),

    #[error("variable does not belong to this tape")]
    NotOnTape,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("undefined correlation: zero variance in {0}")]
    UndefinedCorrelation(&'static str),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Whether this error (or the stage error it wraps) is a numeric failure.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::Diverged { .. } | Error::UndefinedCorrelation(_) => true,
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    /// Whether this error comes from reading a persisted artifact.
    pub fn is_format(&self) -> bool {
        match self {
            Error::MagicMismatch { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::Format(_)
            | Error::Io(_) => true,
            Error::Stage { source, .. } => source.is_format(),
            _ => false,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
