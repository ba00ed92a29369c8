use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] attnembed_core::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed: max relative error {error:e} exceeds {tolerance:e}")]
    GradCheck { error: f64, tolerance: f64 },
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Short category used in the machine-readable failure line.
    pub fn kind(&self) -> &'static str {
        use attnembed_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config { .. } | E::Argument(_)) => "config",
            CliError::GradCheck { .. } | CliError::Core(E::Numeric(_)) => "numeric",
            CliError::Io { .. } | CliError::Core(E::Io(_) | E::Parse { .. }) => "io",
            CliError::Core(E::Dimension(_) | E::Contract(_)) => "internal",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "numeric" => 3,
            "io" => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
