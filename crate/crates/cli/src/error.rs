use std::fmt;
use std::process::ExitCode;

/// Failure classes mapped to process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Model,
}

impl Kind {
    pub fn exit_code(self) -> ExitCode {
        match self {
            Kind::Usage => ExitCode::from(1),
            Kind::Data => ExitCode::from(2),
            Kind::Model => ExitCode::from(3),
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn usage(msg: impl fmt::Display) -> Failure {
    Failure {
        kind: Kind::Usage,
        error: anyhow::anyhow!("{msg}"),
    }
}

pub fn data(msg: impl fmt::Display) -> Failure {
    Failure {
        kind: Kind::Data,
        error: anyhow::anyhow!("{msg}"),
    }
}

/// Tags an error with its exit class and a short context line.
pub trait Classify<T> {
    fn or_usage(self, context: impl fmt::Display) -> CliResult<T>;
    fn or_data(self, context: impl fmt::Display) -> CliResult<T>;
    fn or_model(self, context: impl fmt::Display) -> CliResult<T>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn or_usage(self, context: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| wrap(Kind::Usage, e.into(), context))
    }

    fn or_data(self, context: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| wrap(Kind::Data, e.into(), context))
    }

    fn or_model(self, context: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| wrap(Kind::Model, e.into(), context))
    }
}

fn wrap(kind: Kind, error: anyhow::Error, context: impl fmt::Display) -> Failure {
    Failure {
        kind,
        error: error.context(context.to_string()),
    }
}
