use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] sdpc_core::Error),

    #[error("report: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use sdpc_core::Error as E;
        match self {
            Self::Usage(_) => 2,
            Self::Io(_) => 3,
            Self::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => 3,
            Self::Csv(_) => 4,
            Self::Core(e) => match e {
                E::Config(_) => 2,
                E::Io(_) => 3,
                E::Divergence { .. } | E::NonFinite(_) => 5,
                _ => 4,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;
    use sdpc_core::Error as E;

    #[test]
    fn exit_codes_by_kind() {
        let io = || std::io::Error::new(std::io::ErrorKind::NotFound, "x");
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(E::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(io()).exit_code(), 3);
        assert_eq!(CliError::from(E::Io(io())).exit_code(), 3);
        assert_eq!(CliError::from(E::Format("x".into())).exit_code(), 4);
        assert_eq!(CliError::from(E::Underflow).exit_code(), 4);
        assert_eq!(CliError::from(E::NonFinite("x".into())).exit_code(), 5);
        let d = E::Divergence { step: 3, reason: "nan".into() };
        assert_eq!(CliError::from(d).exit_code(), 5);
        assert_eq!(CliError::from(csv::Error::from(io())).exit_code(), 3);
    }
}
