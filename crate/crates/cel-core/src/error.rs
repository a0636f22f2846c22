//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CelError {
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cluster index {k} out of range ({m_q} clusters)")]
    BadCluster { k: usize, m_q: usize },
    #[error("cluster {k} has {members} member(s); splitting needs at least 2")]
    Unsplittable { k: usize, members: usize },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("AUC needs at least one positive and one negative example")]
    SingleClass,
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("no score threshold balances interaction counts within d={d}")]
    BalanceInfeasible { d: u64 },
}

pub type Result<T> = std::result::Result<T, CelError>;
