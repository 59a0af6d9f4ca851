use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model `{model}`: {reason}")]
    InvalidModel { model: String, reason: String },

    #[error("invalid workload point: {0}")]
    InvalidWorkload(String),

    #[error("invalid hardware config: {0}")]
    InvalidHardware(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("infeasible tiling for {m}x{k}x{n} GEMM: {reason}")]
    InfeasibleTiling {
        m: usize,
        k: usize,
        n: usize,
        reason: String,
    },

    #[error("cube {0} is outside the mesh")]
    UnknownCube(usize),

    #[error("collective group {0:?} is not connected in the mesh")]
    DisconnectedGroup(Vec<usize>),

    #[error("cannot partition {cubes} cubes into groups for {kv_heads} KV heads: {reason}")]
    IndivisibleHeads {
        kv_heads: usize,
        cubes: usize,
        reason: String,
    },

    #[error("placement rejected: {0}")]
    InvalidPlacement(String),

    #[error("schedule is malformed: {0}")]
    InvalidSchedule(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("merge over shards that are all empty")]
    AllNeutral,
}
