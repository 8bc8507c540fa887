use thiserror::Error;

use crate::report::FaultReport;

/// Everything that can go wrong in the simulator.
///
/// Tag faults are kept apart from usage errors and allocation failures so
/// that callers (and the harness) can tell a detected memory-safety bug from
/// a misuse of the simulator itself.
#[derive(Debug, Error)]
pub enum MtError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("allocation failure: requested {requested} bytes, {available} available")]
    OutOfMemory { requested: u64, available: u64 },
    #[error("{0}")]
    Fault(Box<FaultReport>),
}

impl MtError {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        MtError::Usage(msg.into())
    }

    pub fn fault(&self) -> Option<&FaultReport> {
        match self {
            MtError::Fault(report) => Some(report),
            _ => None,
        }
    }

    pub fn is_fault(&self) -> bool {
        matches!(self, MtError::Fault(_))
    }
}

impl From<FaultReport> for MtError {
    fn from(report: FaultReport) -> Self {
        MtError::Fault(Box::new(report))
    }
}

pub type Result<T> = std::result::Result<T, MtError>;
