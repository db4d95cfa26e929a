use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use prunq::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Other,
    Config,
    Data,
    Infeasible,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Other => 1,
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Infeasible => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Kind::Other => "error",
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Kind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Kind::Data, message)
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind.code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error={} message={:?}", self.kind.label(), self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::InvalidArgument(_) | Error::Json(_) => Kind::Config,
            Error::Idx(_) | Error::Format(_) => Kind::Data,
            Error::Infeasible(_) | Error::NoBreakEven => Kind::Infeasible,
            Error::Shape(_) | Error::Divergence { .. } | Error::Io(_) => Kind::Other,
        };
        Self::new(kind, e.to_string())
    }
}

/// Attaches `path` to an error while keeping its kind, or forcing `kind`
/// for I/O failures.
pub fn at_path(kind: Kind, path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| {
        let mut err = CliError::from(e);
        if err.kind == Kind::Other {
            err.kind = kind;
        }
        err.message = format!("{}: {}", path.display(), err.message);
        err
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use prunq::error::{FormatError, IdxError};

    #[test]
    fn library_errors_map_to_kinds() {
        let cases = [
            (Error::InvalidArgument("x".into()), 2),
            (Error::Idx(IdxError::BadMagic { expected: 1, found: 2 }), 3),
            (Error::Format(FormatError::UnexpectedEof), 3),
            (Error::Infeasible("x".into()), 4),
            (Error::NoBreakEven, 4),
            (Error::Divergence { iteration: 1, loss: f64::NAN }, 1),
        ];
        for (e, code) in cases {
            assert_eq!(CliError::from(e).kind.code(), code);
        }
    }

    #[test]
    fn io_errors_take_the_context_kind() {
        let e = Error::Io(std::io::Error::from(std::io::ErrorKind::NotFound));
        let err = at_path(Kind::Data, Path::new("a/b"))(e);
        assert_eq!(err.kind, Kind::Data);
        assert!(err.message.starts_with("a/b: "));
    }
}
