use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value broke one of the data-model invariants. `invariant` is a stable
    /// short name ("normalization", "class-count", ...) that callers may match on.
    #[error("{}invariant `{invariant}` violated: {detail}", line_prefix(*.line))]
    Validation {
        invariant: &'static str,
        detail: String,
        line: Option<usize>,
    },

    #[error("{}shape mismatch: {detail}", line_prefix(*.line))]
    Shape { detail: String, line: Option<usize> },

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("{what} {value} out of range {range}")]
    Range {
        what: &'static str,
        value: String,
        range: String,
    },

    #[error("operation requires labeled data but trace `{id}` has no label")]
    LabelRequired { id: String },

    #[error("dataset is empty")]
    EmptyData,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn line_prefix(line: Option<usize>) -> String {
    match line {
        Some(l) => format!("line {l}: "),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn validation(invariant: &'static str, detail: impl Into<String>) -> Self {
        Error::Validation {
            invariant,
            detail: detail.into(),
            line: None,
        }
    }

    pub(crate) fn shape(detail: impl Into<String>) -> Self {
        Error::Shape {
            detail: detail.into(),
            line: None,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a 1-based file line number to validation and shape errors.
    pub(crate) fn at_line(self, n: usize) -> Self {
        match self {
            Error::Validation {
                invariant, detail, ..
            } => Error::Validation {
                invariant,
                detail,
                line: Some(n),
            },
            Error::Shape { detail, .. } => Error::Shape {
                detail,
                line: Some(n),
            },
            other => other,
        }
    }

    /// Name of the violated invariant, if this is a validation error.
    pub fn invariant(&self) -> Option<&'static str> {
        match self {
            Error::Validation { invariant, .. } => Some(invariant),
            _ => None,
        }
    }
}
