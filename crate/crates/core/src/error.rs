use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed IR at line {line}: {msg}")]
    MalformedIR { line: usize, msg: String },

    #[error("unknown block id {0}")]
    UnknownBlock(u64),

    #[error("bad block map at line {line}: {msg}")]
    BadBlockMap { line: usize, msg: String },

    #[error("profile does not start with the NUGPROF1 magic")]
    BadMagic,

    #[error("corrupt profile record (interval {interval_id}): {reason}")]
    CorruptRecord { interval_id: u64, reason: String },

    #[error("profile does not match the block table: {0}")]
    BlockTableMismatch(String),

    #[error("index {index} out of range (have {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no candidate intervals to select from")]
    EmptyPool,

    #[error("cannot select {requested} samples from a pool of {available}")]
    NTooLarge { requested: usize, available: usize },

    #[error("k = {k} is out of range for {points} points")]
    KOutOfRange { k: usize, points: usize },

    #[error("silhouette needs at least two clusters")]
    SingleCluster,

    #[error("toolchain step `{tool}` failed: {diagnostics}")]
    ToolchainFailure { tool: String, diagnostics: String },

    #[error("`{program}` exited with {status}")]
    NonZeroExit { program: String, status: String },

    #[error("no OK ROI time for interval {0}")]
    MissingRoi(u64),

    #[error("ground-truth runtime is zero")]
    ZeroTruth,

    #[error("reports are not comparable: {0}")]
    WorkloadMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}
