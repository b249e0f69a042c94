use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] mpmrestore::Error),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// 2 configuration, 3 numeric failure, 4 I/O, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use mpmrestore::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(E::Io { .. } | E::MissingSidecar(_) | E::Sidecar { .. } | E::NonFinite { .. } | E::Csv(_)) => 4,
            CliError::Core(E::InvalidParameter(_) | E::Shape { .. } | E::DataLength { .. }) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl From<CliError> for ExitCode {
    fn from(e: CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        let descent = mpmrestore::Error::Descent { solver: "t", iteration: 1, previous: 0.0, current: 1.0, trace: vec![] };
        assert_eq!(CliError::from(descent).exit_code(), 3);
        assert_eq!(CliError::from(mpmrestore::Error::Bracketing("b".into())).exit_code(), 3);
        let io = mpmrestore::Error::io("f", std::io::Error::other("boom"));
        assert_eq!(CliError::from(io).exit_code(), 4);
        assert_eq!(CliError::from(mpmrestore::Error::MissingSidecar("a.json".into())).exit_code(), 4);
        assert_eq!(CliError::from(mpmrestore::Error::NoRegions).exit_code(), 1);
    }
}
