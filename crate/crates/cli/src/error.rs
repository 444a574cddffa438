use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags or missing inputs.
    #[error("config error: {0}")]
    Config(String),
    /// Unreadable or inconsistent data.
    #[error("data error: {0}")]
    Data(String),
    /// Numerical breakdown (divergence, singular systems).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<irnlm::Error> for CliError {
    fn from(e: irnlm::Error) -> Self {
        use irnlm::Error as E;
        if e.is_numerical() {
            return CliError::Numerical(e.to_string());
        }
        match e {
            E::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_exit_codes() {
        let cases = [
            (irnlm::Error::invalid("x"), 2),
            (irnlm::Error::shape("x"), 3),
            (irnlm::Error::Singular("x".into()), 4),
            (
                irnlm::Error::Diverged {
                    step: 1,
                    loss: f64::NAN,
                },
                4,
            ),
        ];
        for (e, code) in cases {
            assert_eq!(CliError::from(e).exit_code(), code);
        }
    }
}
