//! An IO-free implementation of dynamic Byzantine reliable broadcast.
//!
//! One designated sender broadcasts a single payload to a set of processes
//! whose membership changes over time. Processes join and leave through signed
//! requests; views (membership snapshots) are agreed on through a
//! proposal/convergence round and installed with a state transfer so that
//! broadcast guarantees survive reconfiguration. Up to a third of the members
//! of any view, rounded down, may be Byzantine.
//!
//! [`Node`] is the whole state machine. It consumes [`InputEvent`]s and emits
//! [`OutputAction`]s; transport, timing and persistence are left to the caller.

mod broadcast;
pub mod crypto;
mod discovery;
mod engine;
pub mod error;
mod membership;
mod rmulticast;
pub mod view;
pub mod wire;

pub use broadcast::AllowedAck;
pub use crypto::{
    ack_payload, digest, verify_certificate, Digest, Keyring, MessageCertificate, Signature, SignatureScheme,
    SigningKey,
};
pub use discovery::{verify_history, verify_install};
pub use engine::{Callback, InputEvent, Invocation, Lifecycle, Node, NodeConfig, Note, OutputAction};
pub use error::{EngineError, ViewError, WireError};
pub use rmulticast::destinations;
pub use view::{quorum_size, Change, ProcessId, Sign, View, ViewOrdering, ViewSequence};
pub use wire::{
    Body, InstallMessage, MsgKind, Payload, SignedMessage, StateRecord, StateUpdate, StoredCommit, ViewHistory,
};
