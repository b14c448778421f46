use std::path::PathBuf;

/// Every failure the CLI can report, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] permlab_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Format { .. } | CliError::Io { .. } => 2,
            CliError::Failed(_) => 3,
            CliError::Core(permlab_core::Error::Divergence { .. }) => 4,
            CliError::Core(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "usage",
            2 => "format",
            3 => "failure",
            _ => "divergence",
        }
    }

    /// `error kind=<kind> code=<n>: <message>` on a single line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error kind={} code={}: {}", self.kind(), self.exit_code(), msg)
    }
}

pub type CliResult<T> = Result<T, CliError>;
