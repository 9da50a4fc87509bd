use std::io;

use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum EitError {
    #[error("electrode footprints overflow face {face}: {detail}")]
    FootprintOverflow { face: String, detail: String },
    #[error("invalid electrode layout: {0}")]
    InvalidLayout(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("mesh generation failed: {0}")]
    MeshFailure(String),
    #[error("FEM system is singular: {0}")]
    SingularSystem(String),
    #[error("Schroedinger system could not be solved: {0}")]
    IndefiniteSystem(String),
    #[error("rank deficient current patterns: {0}")]
    RankDeficient(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("current pattern {column} is not mean-free (relative column sum {relative_sum:.3e})")]
    NonMeanFreeCurrents { column: usize, relative_sum: f64 },
    #[error("xi = 0 has no minimal zeta")]
    ZeroXi,
    #[error("electrode centers {0} and {1} coincide")]
    DuplicateCenters(usize, usize),
    #[error("boundary integral system near singular (condition estimate {0:.3e})")]
    NearSingularBie(f64),
    #[error("factorization failed: {0}")]
    FactorizationFailure(String),
    #[error("no target components above threshold")]
    NoTargetsFound,
    #[error("unsupported schema version {0}")]
    SchemaVersion(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, EitError>;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

impl EitError {
    pub fn kind(&self) -> ErrorKind {
        use EitError::*;
        match self {
            InvalidParameter(_) | InvalidLayout(_) | FootprintOverflow { .. } | SchemaVersion(_) => ErrorKind::Config,
            Io(_)
            | Parse(_)
            | ShapeMismatch(_)
            | NonMeanFreeCurrents { .. }
            | DegenerateData(_)
            | RankDeficient(_)
            | NoTargetsFound
            | DuplicateCenters(..) => ErrorKind::Data,
            SingularSystem(_)
            | IndefiniteSystem(_)
            | NearSingularBie(_)
            | FactorizationFailure(_)
            | MeshFailure(_)
            | ZeroXi => ErrorKind::Numerical,
        }
    }
}

impl From<serde_json::Error> for EitError {
    fn from(e: serde_json::Error) -> Self {
        EitError::Parse(e.to_string())
    }
}

impl From<csv::Error> for EitError {
    fn from(e: csv::Error) -> Self {
        EitError::Parse(e.to_string())
    }
}
