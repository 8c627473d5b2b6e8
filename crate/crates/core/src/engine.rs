//! The per-process state machine.
//!
//! A [`Node`] consumes [`InputEvent`]s and returns [`OutputAction`]s. It performs
//! no IO and reads no clock, so replaying the same inputs yields the same outputs.
//!
//! Messages that cannot be handled yet (their view is not trusted, is ahead of
//! the current view, or processing is suspended) are buffered and retried after
//! every event until nothing changes.

use serde::{Deserialize, Serialize};

use crate::broadcast::BroadcastState;
use crate::crypto::{digest, Digest, Keyring, SigningKey};
use crate::discovery::Discovery;
use crate::error::EngineError;
use crate::membership::MembershipState;
use crate::rmulticast::RMulticastState;
use crate::view::{ProcessId, View, ViewSequence};
use crate::wire::{Body, MsgKind, Payload, SignedMessage};

const SNAPSHOT_VERSION: u8 = 1;

/// Static parameters of a node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub id: ProcessId,
    pub initial_view: View,
    /// The single designated broadcaster.
    pub sender: ProcessId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Invocation {
    Join,
    Leave,
    Broadcast(Payload),
}

#[derive(Clone, Debug)]
pub enum InputEvent {
    Invoke(Invocation),
    /// A message handed over by the transport. `from` is the transport-level sender,
    /// which need not be the message's signer.
    Receive {
        from: ProcessId,
        message: SignedMessage,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Callback {
    Delivered(Payload),
    JoinComplete,
    LeaveComplete,
}

/// Observable internal transitions, for tracing and checking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Note {
    /// `installed(view)` became true.
    Installed {
        view: View,
    },
    /// The current view changed without being installed yet.
    ViewAdopted {
        view: View,
    },
    Suspended {
        view: View,
    },
    /// An INSTALL was R-delivered and processed.
    InstallAccepted {
        omega: View,
        seq: ViewSequence,
        replaced: View,
    },
    /// A quorum of CONVERGED messages was seen for `seq` replacing `replaced`.
    ConvergedOn {
        replaced: View,
        seq: ViewSequence,
    },
    Proposed {
        view: View,
        seq: ViewSequence,
    },
    CertificateCollected {
        payload: Digest,
        v_cer: View,
    },
    /// A COMMIT with a valid certificate was accepted in `view`.
    CommitAccepted {
        payload: Digest,
        v_cer: View,
        view: View,
    },
    Stored {
        payload: Digest,
        v_cer: View,
    },
    AllowedAck {
        allowed: String,
    },
    Trusted {
        view: View,
    },
    /// A message was discarded for a benign reason, such as a stale view.
    Rejected {
        kind: MsgKind,
        view: Option<View>,
        reason: &'static str,
    },
    /// Evidence of misbehaviour: bad signatures, forged certificates and the like.
    Flagged {
        kind: Option<MsgKind>,
        signer: Option<ProcessId>,
        reason: &'static str,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OutputAction {
    Send {
        to: ProcessId,
        message: SignedMessage,
    },
    /// Send to every process in the universe.
    Flood(SignedMessage),
    Callback(Callback),
    Note(Note),
    /// The node has left and will not act again.
    Halt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lifecycle {
    /// Outside the system and not asked to join.
    Dormant,
    Joining,
    Member,
    Halted,
}

/// Outcome of handling one network message.
pub(crate) enum Disposition {
    Done,
    Defer,
    Drop(&'static str),
    Flag(&'static str),
}

/// Whether a view-tagged message can be processed now.
pub(crate) enum Gate {
    Process,
    Wait,
    Drop(&'static str),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct NodeState {
    pub cfg: NodeConfig,
    pub lifecycle: Lifecycle,
    pub m: MembershipState,
    pub b: BroadcastState,
    pub rm: RMulticastState,
    pub d: Discovery,
    pub deferred: Vec<SignedMessage>,
}

/// A protocol participant.
pub struct Node {
    pub(crate) key: SigningKey,
    pub(crate) keyring: Keyring,
    pub(crate) s: NodeState,
    pub(crate) out: Vec<OutputAction>,
}

impl Node {
    /// Members of the initial view start installed in it; everyone else starts dormant.
    pub fn new(cfg: NodeConfig, key: SigningKey, keyring: Keyring) -> Node {
        assert_eq!(cfg.id, key.id(), "key does not belong to this node");
        let v0 = cfg.initial_view.clone();
        let member = v0.is_member(cfg.id);
        let s = NodeState {
            lifecycle: if member { Lifecycle::Member } else { Lifecycle::Dormant },
            m: MembershipState::new(v0.clone(), member),
            b: BroadcastState::default(),
            rm: RMulticastState::default(),
            d: Discovery::new(v0),
            deferred: Vec::new(),
            cfg,
        };
        Node { key, keyring, s, out: Vec::new() }
    }

    pub fn id(&self) -> ProcessId {
        self.s.cfg.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.s.cfg
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.s.lifecycle
    }

    pub fn current_view(&self) -> &View {
        &self.s.m.cv
    }

    pub fn is_installed(&self, v: &View) -> bool {
        self.s.m.installed.contains(v)
    }

    pub fn delivered(&self) -> Option<&Payload> {
        self.s.b.delivered.as_ref()
    }

    pub fn is_trusted(&self, v: &View) -> bool {
        self.s.d.trusted(v)
    }

    pub fn pending_messages(&self) -> usize {
        self.s.deferred.len()
    }

    /// Processes one event and returns everything it caused.
    pub fn step(&mut self, event: InputEvent) -> Result<Vec<OutputAction>, EngineError> {
        if self.s.lifecycle == Lifecycle::Halted {
            return Err(EngineError::Halted);
        }
        match event {
            InputEvent::Invoke(inv) => self.invoke(inv)?,
            InputEvent::Receive { message, .. } => self.receive(message),
        }
        self.poll();
        Ok(std::mem::take(&mut self.out))
    }

    fn invoke(&mut self, inv: Invocation) -> Result<(), EngineError> {
        match inv {
            Invocation::Join => self.invoke_join(),
            Invocation::Leave => self.invoke_leave(),
            Invocation::Broadcast(m) => self.invoke_broadcast(m),
        }
    }

    fn receive(&mut self, msg: SignedMessage) {
        if !msg.verify(&self.keyring) {
            self.note(Note::Flagged {
                kind: Some(msg.kind()),
                signer: Some(msg.signer),
                reason: "invalid message signature",
            });
            return;
        }
        if self.s.lifecycle == Lifecycle::Dormant && msg.kind() != MsgKind::History {
            self.note(Note::Rejected { kind: msg.kind(), view: None, reason: "not participating" });
            return;
        }
        match self.dispatch(&msg) {
            Disposition::Defer => self.s.deferred.push(msg),
            other => self.report(&msg, other),
        }
    }

    fn report(&mut self, msg: &SignedMessage, d: Disposition) {
        match d {
            Disposition::Done | Disposition::Defer => {}
            Disposition::Drop(reason) => {
                self.note(Note::Rejected { kind: msg.kind(), view: msg.body.view().cloned(), reason })
            }
            Disposition::Flag(reason) => {
                self.note(Note::Flagged { kind: Some(msg.kind()), signer: Some(msg.signer), reason })
            }
        }
    }

    fn dispatch(&mut self, msg: &SignedMessage) -> Disposition {
        match &msg.body {
            Body::Reconfig { change, view } => self.on_reconfig(msg, *change, view),
            Body::RecConfirm { view } => self.on_rec_confirm(msg.signer, view),
            Body::Propose { seq, view, evidence } => self.on_propose(msg.signer, seq, view, evidence),
            Body::Converged { seq, view } => self.on_converged(msg, seq, view),
            Body::Install { psi, install } => self.on_install_envelope(&msg.body, psi, install),
            Body::StateUpdate { psi, update } => self.on_state_update_envelope(&msg.body, psi, update),
            Body::Prepare { payload, view } => self.on_prepare(msg, payload, view),
            Body::Ack { payload, signature, view } => self.on_ack(msg.signer, payload, signature, view),
            Body::Commit { payload, certificate, view } => self.on_commit(msg.signer, payload, certificate, view),
            Body::Deliver { payload, view } => self.on_deliver(msg.signer, payload, view),
            Body::DiscoveryRequest => self.on_discovery_request(msg.signer),
            Body::History(h) => self.on_history(h),
        }
    }

    /// Retries buffered messages and fires enabled conditions until nothing changes.
    fn poll(&mut self) {
        loop {
            let mut progressed = self.retry_deferred();
            if self.s.lifecycle == Lifecycle::Halted {
                break;
            }
            progressed |= self.poll_membership();
            progressed |= self.poll_broadcast();
            if !progressed || self.s.lifecycle == Lifecycle::Halted {
                break;
            }
        }
    }

    fn retry_deferred(&mut self) -> bool {
        let mut progressed = false;
        loop {
            let pending = std::mem::take(&mut self.s.deferred);
            let mut changed = false;
            for msg in pending {
                if self.s.lifecycle == Lifecycle::Halted {
                    break;
                }
                match self.dispatch(&msg) {
                    Disposition::Defer => self.s.deferred.push(msg),
                    other => {
                        changed = true;
                        self.report(&msg, other);
                    }
                }
            }
            progressed |= changed;
            if !changed {
                return progressed;
            }
        }
    }

    pub(crate) fn me(&self) -> ProcessId {
        self.s.cfg.id
    }

    pub(crate) fn is_sender(&self) -> bool {
        self.s.cfg.sender == self.s.cfg.id
    }

    /// Outside the system, only view-discovery gossip is absorbed and nothing is sent.
    pub(crate) fn may_send(&self) -> bool {
        matches!(self.s.lifecycle, Lifecycle::Joining | Lifecycle::Member)
    }

    /// `installed(cv)` holds and processing is not suspended.
    pub(crate) fn processing(&self) -> bool {
        !self.s.m.suspended && self.s.m.installed.contains(&self.s.m.cv)
    }

    /// Classifies a PREPARE, COMMIT or RECONFIG tagged with `v`.
    pub(crate) fn gate(&self, v: &View) -> Gate {
        if !self.s.d.trusted(v) {
            return Gate::Wait;
        }
        let cv = &self.s.m.cv;
        if cv.precedes(v) {
            Gate::Wait
        } else if v != cv {
            Gate::Drop("stale view")
        } else if !cv.is_member(self.me()) {
            Gate::Drop("not a member of the view")
        } else if !self.processing() {
            Gate::Wait
        } else {
            Gate::Process
        }
    }

    pub(crate) fn note(&mut self, n: Note) {
        self.out.push(OutputAction::Note(n));
    }

    pub(crate) fn callback(&mut self, c: Callback) {
        self.out.push(OutputAction::Callback(c));
    }

    pub(crate) fn sign(&self, body: Body) -> SignedMessage {
        SignedMessage::sign(&self.key, body)
    }

    pub(crate) fn send(&mut self, to: ProcessId, body: Body) {
        if self.may_send() {
            let message = self.sign(body);
            self.out.push(OutputAction::Send { to, message });
        }
    }

    /// Sends to every member of `view`.
    pub(crate) fn disseminate(&mut self, view: &View, body: Body) {
        if !self.may_send() {
            return;
        }
        let message = self.sign(body);
        for to in view.members() {
            self.out.push(OutputAction::Send { to, message: message.clone() });
        }
    }

    pub(crate) fn send_to_all(&mut self, targets: impl IntoIterator<Item = ProcessId>, body: Body) {
        if !self.may_send() {
            return;
        }
        let message = self.sign(body);
        for to in targets {
            self.out.push(OutputAction::Send { to, message: message.clone() });
        }
    }

    pub(crate) fn flood(&mut self, body: Body) {
        if self.may_send() {
            let message = self.sign(body);
            self.out.push(OutputAction::Flood(message));
        }
    }

    pub(crate) fn halt(&mut self) {
        self.s.lifecycle = Lifecycle::Halted;
        self.s.deferred.clear();
        self.out.push(OutputAction::Halt);
    }

    /// Version byte followed by the serialized state. Keys are not included.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = vec![SNAPSHOT_VERSION];
        out.extend(bincode::serialize(&self.s).expect("node state serializes"));
        out
    }

    pub fn restore(bytes: &[u8], key: SigningKey, keyring: Keyring) -> Result<Node, EngineError> {
        let (&version, body) = bytes.split_first().ok_or_else(|| EngineError::Snapshot("empty snapshot".into()))?;
        if version != SNAPSHOT_VERSION {
            return Err(EngineError::Snapshot(format!("unsupported version {version}")));
        }
        let s: NodeState = bincode::deserialize(body).map_err(|e| EngineError::Snapshot(e.to_string()))?;
        if s.cfg.id != key.id() {
            return Err(EngineError::Snapshot("key does not belong to this node".into()));
        }
        Ok(Node { key, keyring, s, out: Vec::new() })
    }

    /// Digest of the snapshot, for equality checks.
    pub fn state_digest(&self) -> Digest {
        digest(&self.snapshot())
    }
}
