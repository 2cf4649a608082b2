use thiserror::Error;

use crate::closed_form::DegeneracyReport;
use crate::partition_lattice::{GroundSet, Partition};

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("ground set mismatch: {left} vs {right}")]
    GroundMismatch { left: GroundSet, right: GroundSet },
    #[error("cannot parse partition `{input}`: {reason}")]
    Parse { input: String, reason: String },
    #[error("degenerate decay rates: {} bad coincidence(s)", .0.bad_count())]
    Degenerate(Box<DegeneracyReport>),
    #[error("coefficient table on {ground} is not invertible: zero diagonal at {at}")]
    NotInvertible { ground: GroundSet, at: Partition },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn same_ground(left: GroundSet, right: GroundSet) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::GroundMismatch { left, right })
    }
}
