use std::fmt;

/// Errors surfaced by parsing, model construction, and inference.
#[derive(Debug)]
pub enum Error {
    Io(std::io::Error),
    /// Malformed input data; `line` is 1-based where known, 0 otherwise.
    Parse { line: usize, message: String },
    /// A structural invariant of a dependency graph was violated.
    Graph(String),
    /// Dimension or shape inconsistency between model components.
    Shape(String),
    /// Unknown predicate or dependency label.
    Vocab(String),
    /// An exact enumeration would exceed the configured budget.
    Budget { required: u128, budget: u64 },
    /// A precondition on an argument was violated.
    Invalid(String),
    Config(String),
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Parse { line, message } => {
                if *line > 0 {
                    write!(f, "parse error at line {line}: {message}")
                } else {
                    write!(f, "parse error: {message}")
                }
            }
            Error::Graph(m) => write!(f, "invalid graph: {m}"),
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Vocab(m) => write!(f, "vocabulary error: {m}"),
            Error::Budget { required, budget } => write!(
                f,
                "enumeration budget exceeded: {required} configurations > budget {budget}"
            ),
            Error::Invalid(m) => write!(f, "invalid argument: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
