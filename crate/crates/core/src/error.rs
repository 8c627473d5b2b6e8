use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ViewError {
    #[error("view has no members")]
    EmptyMembership,
    #[error("empty view sequence")]
    EmptySequence,
    #[error("views are not pairwise comparable")]
    NotASequence,
    #[error("view carries {len} changes, cap is {cap}")]
    TooManyChanges { len: usize, cap: usize },
    #[error("truncated view encoding")]
    Truncated,
    #[error("invalid sign byte {0:#04x}")]
    BadSign(u8),
    #[error("changes are not in canonical order")]
    NotCanonical,
    #[error("trailing bytes after view encoding")]
    TrailingBytes,
    #[error("malformed change {0:?}")]
    BadChange(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),
    #[error("truncated message")]
    Truncated,
    #[error("trailing bytes after message")]
    TrailingBytes,
    #[error("{what} count {len} exceeds cap {cap}")]
    TooLarge { what: &'static str, len: usize, cap: usize },
    #[error("invalid view: {0}")]
    View(#[from] ViewError),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

/// Errors surfaced to the caller of [`crate::Node::step`]. Network input never
/// produces an error; malformed or forged messages are dropped and reported as notes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("node has halted")]
    Halted,
    #[error("join invoked twice")]
    JoinTwice,
    #[error("join invoked by a member of the initial view")]
    AlreadyMember,
    #[error("{0} requires a participating node")]
    NotParticipant(&'static str),
    #[error("leave invoked twice")]
    LeaveTwice,
    #[error("only the designated sender may broadcast")]
    NotSender,
    #[error("broadcast invoked twice")]
    BroadcastTwice,
    #[error("snapshot: {0}")]
    Snapshot(String),
}
