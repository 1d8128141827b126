use nerfinv_core::numcore::{CheckpointError, NumError};
use nerfinv_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    MissingCheckpoint(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Core(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingCheckpoint(_) => 2,
            CliError::Config(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Usage(_) | CliError::Core(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingCheckpoint(_) => "missing_checkpoint",
            CliError::Config(_) => "config",
            CliError::Divergence(_) => "divergence",
            CliError::Usage(_) => "usage",
            CliError::Core(_) => "runtime",
        }
    }

    /// Single-line JSON report for stderr.
    pub fn to_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Divergence(m) => CliError::Divergence(m),
            CoreError::Num(n @ NumError::NonFinite { .. }) => CliError::Divergence(n.to_string()),
            CoreError::Missing(m) => CliError::MissingCheckpoint(format!("missing file: {m}")),
            CoreError::Checkpoint(c @ CheckpointError::Io(_)) => CliError::MissingCheckpoint(c.to_string()),
            CoreError::Checkpoint(c) => CliError::MissingCheckpoint(format!("unusable checkpoint: {c}")),
            other => CliError::Core(other),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CoreError::Checkpoint(e).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_single_line_report() {
        assert_eq!(CliError::MissingCheckpoint("x".into()).exit_code(), 2);
        assert_eq!(CliError::Config("x".into()).exit_code(), 3);
        assert_eq!(CliError::from(CoreError::Divergence("nan".into())).exit_code(), 4);
        let line = CliError::Config("bad\nkey".into()).to_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["exit_code"], 3);
        assert_eq!(v["error"], "config");
    }
}
