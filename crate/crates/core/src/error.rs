use thiserror::Error;

/// Errors surfaced by the panel pipeline.
///
/// The CLI maps these onto process exit codes: configuration and shape
/// problems exit with 2, data and checkpoint problems with 3, numeric
/// failures with 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (divisibility constraints, bad ranges, unknown keys).
    #[error("config error: {0}")]
    Config(String),

    /// Operand shapes do not conform; the message carries both shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Coordinates or values outside their stated domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Broken dataset files, missing scenes, out-of-range labels.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint magic/version/config mismatch.
    #[error("version error: {0}")]
    Version(String),

    /// Non-finite values, degenerate geometry, failed gradient checks.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// No panel covered a pixel with positive weight during merging.
    #[error("merge error: {0}")]
    Merge(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape_mismatch(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape(format!("{op}: operand shapes {lhs:?} and {rhs:?} do not conform"))
    }

    /// Exit code for the CLI surface: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Domain(_) => 2,
            Error::Data(_) | Error::Version(_) | Error::Io(_) => 3,
            Error::Numeric(_) | Error::Merge(_) => 4,
        }
    }
}
