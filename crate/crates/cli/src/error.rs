use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("missing or unreadable artifact {path}: {detail}")]
    Artifact { path: String, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Artifact { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Artifact { .. } => "artifact",
            CliError::Numeric(_) => "numeric",
            CliError::Other(_) => "internal",
        }
    }

    /// The single-line JSON written to stderr on failure.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }

    pub(crate) fn artifact(path: &std::path::Path, detail: impl ToString) -> Self {
        CliError::Artifact {
            path: path.display().to_string(),
            detail: detail.to_string(),
        }
    }
}

impl From<piba_core::Error> for CliError {
    fn from(e: piba_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

/// Core errors raised while reading `path` count as artifact errors.
pub(crate) fn reading<T>(path: &std::path::Path, r: piba_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::artifact(path, e))
}
