use thiserror::Error;

/// Errors surfaced by the library. `Input` variants map to exit code 2 in the
/// command line tool, everything numeric to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("point outside the admissible region: {0}")]
    OutOfDomain(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("listmode error: {0}")]
    Listmode(String),
    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("solver failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code convention: 1 for numeric failure, 2 for bad input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
