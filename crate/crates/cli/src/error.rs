use lclab::LabError;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed config or input data. Exit 2.
    Usage(String),
    /// Reading or writing a file failed. Exit 3.
    Io(String),
    /// An internal invariant did not hold. Exit 4.
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Internal(_) => "internal",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Internal(m) => m,
        }
    }

    /// Single-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.code(),
            "message": self.message().replace('\n', " "),
        })
        .to_string()
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        let msg = e.to_string();
        match e {
            LabError::Io { .. } => CliError::Io(msg),
            LabError::Dimension(_) => CliError::Internal(msg),
            LabError::Config(_)
            | LabError::ContextLength { .. }
            | LabError::Checkpoint(_)
            | LabError::Input(_)
            | LabError::Ingestion { .. }
            | LabError::EmptyEvaluation(_)
            | LabError::Parse(_) => CliError::Usage(msg),
        }
    }
}
