//! Byzantine processes. Each is a separate program holding only its own key.

use std::collections::{BTreeMap, BTreeSet};

use dbrb_core::{
    ack_payload, Body, Digest, InputEvent, Invocation, Keyring, MessageCertificate, Node, NodeConfig, OutputAction,
    Payload, ProcessId, Signature, SignedMessage, SigningKey, View,
};

use crate::scenario::Strategy;

/// What every adversary knows about the run.
#[derive(Clone, Debug)]
pub struct Context {
    pub universe: Vec<ProcessId>,
    pub initial_view: View,
    pub sender: ProcessId,
    pub byzantine: BTreeSet<ProcessId>,
}

pub struct Adversary {
    key: SigningKey,
    keyring: Keyring,
    ctx: Context,
    program: Program,
}

enum Program {
    Silent,
    Equivocator(Equivocator),
    Accomplice,
    Forger { answered: BTreeSet<Digest> },
    Replayer(Box<Replayer>),
}

#[derive(Default)]
struct Equivocator {
    /// Recipients of each payload.
    groups: BTreeMap<Payload, BTreeSet<ProcessId>>,
    acks: BTreeMap<Payload, BTreeMap<ProcessId, Signature>>,
    committed: BTreeSet<Payload>,
}

struct Replayer {
    node: Node,
    captured: Vec<SignedMessage>,
    replayed: BTreeSet<Digest>,
    newest: View,
}

impl Adversary {
    pub fn new(strategy: &Strategy, key: SigningKey, keyring: Keyring, ctx: Context) -> Adversary {
        let id = key.id();
        let program = match strategy {
            Strategy::Silent => Program::Silent,
            Strategy::EquivocateSender if id == ctx.sender => Program::Equivocator(Equivocator::default()),
            Strategy::EquivocateSender => Program::Accomplice,
            Strategy::ForgeCertificate => Program::Forger { answered: BTreeSet::new() },
            Strategy::ReplayStaleView => {
                let cfg = NodeConfig { id, initial_view: ctx.initial_view.clone(), sender: ctx.sender };
                Program::Replayer(Box::new(Replayer {
                    node: Node::new(cfg, key.clone(), keyring.clone()),
                    captured: Vec::new(),
                    replayed: BTreeSet::new(),
                    newest: ctx.initial_view.clone(),
                }))
            }
        };
        Adversary { key, keyring, ctx, program }
    }

    pub fn id(&self) -> ProcessId {
        self.key.id()
    }

    pub fn step(&mut self, event: InputEvent) -> Vec<OutputAction> {
        let mut out = Vec::new();
        match &mut self.program {
            Program::Silent => {}
            Program::Equivocator(eq) => eq.step(&self.key, &self.keyring, &self.ctx, event, &mut out),
            Program::Accomplice => accomplice(&self.key, &self.ctx, event, &mut out),
            Program::Forger { answered } => forge(&self.key, &self.ctx, answered, event, &mut out),
            Program::Replayer(r) => r.step(&self.keyring, &self.ctx, event, &mut out),
        }
        out
    }
}

fn send(out: &mut Vec<OutputAction>, to: impl IntoIterator<Item = ProcessId>, message: &SignedMessage) {
    for to in to {
        out.push(OutputAction::Send { to, message: message.clone() });
    }
}

fn ack(key: &SigningKey, payload: &Payload, view: &View) -> Signature {
    key.sign(&ack_payload(&payload.0, view))
}

impl Equivocator {
    fn step(
        &mut self,
        key: &SigningKey,
        keyring: &Keyring,
        ctx: &Context,
        event: InputEvent,
        out: &mut Vec<OutputAction>,
    ) {
        let v = &ctx.initial_view;
        let me = key.id();
        match event {
            InputEvent::Invoke(Invocation::Broadcast(m1)) => {
                let mut m2 = m1.clone();
                m2.0.push(b'\'');
                let honest: Vec<ProcessId> = v.members().into_iter().filter(|p| !ctx.byzantine.contains(p)).collect();
                let (h1, h2) = honest.split_at(honest.len().div_ceil(2));
                let accomplices: BTreeSet<ProcessId> =
                    v.members().into_iter().filter(|p| ctx.byzantine.contains(p) && *p != me).collect();
                for (m, half) in [(m1, h1), (m2, h2)] {
                    let mut group: BTreeSet<ProcessId> = half.iter().copied().collect();
                    group.extend(&accomplices);
                    let prepare = SignedMessage::sign(key, Body::Prepare { payload: m.clone(), view: v.clone() });
                    send(out, group.iter().copied(), &prepare);
                    self.acks.entry(m.clone()).or_default().insert(me, ack(key, &m, v));
                    self.groups.insert(m, group);
                }
            }
            InputEvent::Receive { message, .. } => match &message.body {
                Body::Ack { payload, signature, view } if view == v => {
                    let valid = signature.signer == message.signer
                        && keyring.verify(message.signer, &ack_payload(&payload.0, v), signature);
                    if valid && self.groups.contains_key(payload) {
                        self.acks.entry(payload.clone()).or_default().insert(message.signer, signature.clone());
                    }
                }
                Body::Commit { payload, view, .. } => {
                    let deliver =
                        SignedMessage::sign(key, Body::Deliver { payload: payload.clone(), view: view.clone() });
                    send(out, [message.signer], &deliver);
                }
                _ => {}
            },
            InputEvent::Invoke(_) => {}
        }
        let Ok(q) = v.quorum_size() else { return };
        for (m, sigs) in &self.acks {
            if sigs.len() < q || self.committed.contains(m) {
                continue;
            }
            let cer = MessageCertificate::assemble(&m.0, v.clone(), sigs.values().cloned());
            let commit =
                SignedMessage::sign(key, Body::Commit { payload: m.clone(), certificate: cer, view: v.clone() });
            send(out, self.groups[m].iter().copied(), &commit);
            self.committed.insert(m.clone());
        }
    }
}

/// Acknowledges whatever the sender prepares and confirms every COMMIT.
fn accomplice(key: &SigningKey, ctx: &Context, event: InputEvent, out: &mut Vec<OutputAction>) {
    let InputEvent::Receive { message, .. } = event else {
        return;
    };
    match &message.body {
        Body::Prepare { payload, view } if message.signer == ctx.sender => {
            let body = Body::Ack { payload: payload.clone(), signature: ack(key, payload, view), view: view.clone() };
            send(out, [ctx.sender], &SignedMessage::sign(key, body));
        }
        Body::Commit { payload, view, .. } => {
            let body = Body::Deliver { payload: payload.clone(), view: view.clone() };
            send(out, [message.signer], &SignedMessage::sign(key, body));
        }
        _ => {}
    }
}

/// Answers each PREPARE with COMMITs for a substituted payload: one whose
/// certificate is full of garbage signatures, one signed by this process alone,
/// and one whose certificate belongs to the genuine payload.
fn forge(
    key: &SigningKey,
    ctx: &Context,
    answered: &mut BTreeSet<Digest>,
    event: InputEvent,
    out: &mut Vec<OutputAction>,
) {
    let InputEvent::Receive { message, .. } = event else {
        return;
    };
    let Body::Prepare { payload, view } = &message.body else {
        return;
    };
    if message.signer != ctx.sender || !answered.insert(message.digest()) {
        return;
    }
    let mut forged = b"forged:".to_vec();
    forged.extend_from_slice(&payload.0);
    let forged = Payload(forged);
    let members = view.members();

    let garbage = members.iter().map(|&p| Signature { signer: p, bytes: vec![0xA5; 32] });
    let cer_garbage = MessageCertificate::assemble(&forged.0, view.clone(), garbage);
    let cer_alone = MessageCertificate::assemble(&forged.0, view.clone(), [ack(key, &forged, view)]);
    let mut cer_swapped = MessageCertificate::assemble(&payload.0, view.clone(), [ack(key, payload, view)]);
    cer_swapped
        .signatures
        .extend(members.iter().filter(|&&p| p != key.id()).map(|&p| Signature { signer: p, bytes: vec![0x5A; 32] }));
    cer_swapped.signatures.sort_by_key(|s| s.signer);
    for certificate in [cer_garbage, cer_alone, cer_swapped] {
        let body = Body::Commit { payload: forged.clone(), certificate, view: view.clone() };
        send(out, members.iter().copied(), &SignedMessage::sign(key, body));
    }
}

impl Replayer {
    fn step(&mut self, keyring: &Keyring, ctx: &Context, event: InputEvent, out: &mut Vec<OutputAction>) {
        let incoming = match &event {
            InputEvent::Receive { message, .. } if message.verify(keyring) => Some(message.clone()),
            _ => None,
        };
        if let Ok(actions) = self.node.step(event) {
            out.extend(actions);
        }
        let Some(msg) = incoming else { return };
        let newer = msg.body.view().filter(|v| self.newest.precedes(v)).cloned();
        self.captured.push(msg);
        let Some(newer) = newer else { return };
        self.newest = newer;
        let me = self.node.id();
        for old in &self.captured {
            let stale = old.body.view().is_some_and(|v| v.precedes(&self.newest));
            if stale && self.replayed.insert(old.digest()) {
                send(out, ctx.universe.iter().copied().filter(|&p| p != me), old);
            }
        }
    }
}
