use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown write-set member: {0}")]
    UnknownWrite(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("bounds overflow: roughly {estimate} schedules exceed the limit of {limit}")]
    BoundOverflow { estimate: u128, limit: usize },

    #[error("no witness to emit")]
    NoWitness,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
