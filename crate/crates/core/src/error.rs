use std::path::PathBuf;

/// Errors raised by the shape-model fusion library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("mesh has no faces")]
    EmptyMesh,

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("dimension mismatch ({what}): expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("surface distance {distance:.6} exceeds embedding cap {cap:.6} (bad registration upstream?)")]
    EmbeddingCap { distance: f64, cap: f64 },

    #[error("dense matrix with {rows} rows exceeds the cap of {cap}; use the low-rank paths")]
    DenseCap { rows: usize, cap: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("rank deficient system: rank {rank} of {required} required")]
    RankDeficient { rank: usize, required: usize },

    #[error("missing landmark `{0}`")]
    MissingLandmark(String),

    #[error("landmark mismatch: {0}")]
    LandmarkMismatch(String),

    #[error("all correspondences were pruned")]
    AllPruned,

    #[error("{failed} of {total} items failed (more than 10%); last error: {last}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        last: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("integrity check failed for {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (singular systems, failed
    /// registrations) as opposed to bad user input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::RankDeficient { .. }
                | Error::DegenerateData(_)
                | Error::AllPruned
                | Error::TooManyFailures { .. }
                | Error::Numerical(_)
                | Error::EmbeddingCap { .. }
        )
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
