use std::fmt;

/// Why a transaction was rolled back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AbortReason {
    /// Write-write conflict or SI temporal skew detected by the scheduler.
    CcConflict,
    /// Exclusion window violation found by the certifier.
    SsnExclusion,
    /// Dangerous structure found by the SSI certifier.
    SsiDangerous,
    /// Exclusion violation caused only by the active safe snapshot.
    SafeSnapshot,
    /// Requested by the caller.
    User,
}

impl AbortReason {
    pub const ALL: [AbortReason; 5] = [
        AbortReason::CcConflict,
        AbortReason::SsnExclusion,
        AbortReason::SsiDangerous,
        AbortReason::SafeSnapshot,
        AbortReason::User,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AbortReason::CcConflict => "cc_conflict",
            AbortReason::SsnExclusion => "ssn_exclusion",
            AbortReason::SsiDangerous => "ssi_dangerous",
            AbortReason::SafeSnapshot => "safe_snapshot",
            AbortReason::User => "user",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        AbortReason::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("transaction aborted: {0}")]
    Aborted(AbortReason),
    #[error("worker slot {0} already runs a transaction")]
    SlotOccupied(usize),
    #[error("worker slot {0} out of range (workers = {1})")]
    SlotOutOfRange(usize, usize),
    #[error("record {0} does not exist")]
    NotFound(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error("malformed trace at event {event}: {msg}")]
    MalformedTrace { event: usize, msg: String },
    #[error("script error: {0}")]
    Script(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn abort_reason(&self) -> Option<AbortReason> {
        match self {
            Error::Aborted(r) => Some(*r),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
