use ebsde_core::LabError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("missing [{0}] section")]
    MissingSection(String),

    #[error("[{section}] check failed: {source}")]
    Check {
        section: String,
        #[source]
        source: LabError,
    },

    #[error(transparent)]
    Lab(#[from] LabError),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
