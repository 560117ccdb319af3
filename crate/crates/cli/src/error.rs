use msldp::control::ControlError;
use msldp::homogenize::HomogenizeError;
use msldp::mc::McError;
use msldp::pathopt::PathOptError;
use msldp::ratefn::RateError;
use msldp::simulate::SimError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("{0} self-test check(s) failed")]
    Selftest(usize),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Numeric(_) => 2,
            CliError::Selftest(_) => 3,
        }
    }

    pub fn io(path: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.to_string();
        move |source| CliError::Io { path, source }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Step { .. } | SimError::Horizon(_) | SimError::Eps(_) | SimError::Dimension(_) => {
                CliError::Config(e.to_string())
            }
            SimError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<McError> for CliError {
    fn from(e: McError) -> Self {
        match e {
            McError::Sim(s) => s.into(),
            McError::MissingControl | McError::Invalid(_) => CliError::Config(e.to_string()),
            McError::Sample { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

macro_rules! numeric {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Numeric(e.to_string())
            }
        })*
    };
}

numeric!(HomogenizeError, RateError, ControlError, PathOptError);
