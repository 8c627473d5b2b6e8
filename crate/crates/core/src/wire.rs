//! Protocol messages and their byte encoding.
//!
//! Every message on the wire is a [`SignedMessage`]: a version byte, the logical
//! signer, a tagged body and the signer's signature over everything before it.
//! The signer is independent of the transport sender, so a message can be
//! relayed or replayed by anyone and still be attributed to its author.
//!
//! Integers are big-endian. Views use their canonical encoding. Nested signed
//! messages are restricted to the kinds that may legitimately appear there,
//! which bounds nesting depth.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{
    digest, read_signature, write_signature, Digest, Keyring, MessageCertificate, Signature, SigningKey,
};
use crate::error::WireError;
use crate::view::{Change, ProcessId, Sign, View, ViewSequence, DEFAULT_CHANGE_CAP};

pub const WIRE_VERSION: u8 = 1;

const MAX_SEQUENCE: usize = 256;
const MAX_NESTED: usize = 4096;
const MAX_PAYLOAD: usize = 1 << 20;
const MAX_PROCESSES: usize = 1 << 16;

pub type WireResult<T> = Result<T, WireError>;

/// Opaque application payload.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Payload(pub Vec<u8>);

impl Payload {
    pub fn digest(&self) -> Digest {
        digest(&self.0)
    }
}

impl From<&str> for Payload {
    fn from(s: &str) -> Payload {
        Payload(s.as_bytes().to_vec())
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) if s.len() <= 32 => write!(f, "{s:?}"),
            _ => write!(f, "Payload({} bytes)", self.0.len()),
        }
    }
}

/// Message type, as used in traces and filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgKind {
    Reconfig,
    RecConfirm,
    Propose,
    Converged,
    Install,
    StateUpdate,
    Prepare,
    Ack,
    Commit,
    Deliver,
    DiscoveryRequest,
    History,
}

impl MsgKind {
    pub fn tag(self) -> u8 {
        match self {
            MsgKind::Reconfig => 0x01,
            MsgKind::RecConfirm => 0x02,
            MsgKind::Propose => 0x03,
            MsgKind::Converged => 0x04,
            MsgKind::Install => 0x05,
            MsgKind::StateUpdate => 0x06,
            MsgKind::Prepare => 0x07,
            MsgKind::Ack => 0x08,
            MsgKind::Commit => 0x09,
            MsgKind::Deliver => 0x0A,
            MsgKind::DiscoveryRequest => 0x0B,
            MsgKind::History => 0x0C,
        }
    }

    pub fn from_tag(tag: u8) -> Option<MsgKind> {
        Some(match tag {
            0x01 => MsgKind::Reconfig,
            0x02 => MsgKind::RecConfirm,
            0x03 => MsgKind::Propose,
            0x04 => MsgKind::Converged,
            0x05 => MsgKind::Install,
            0x06 => MsgKind::StateUpdate,
            0x07 => MsgKind::Prepare,
            0x08 => MsgKind::Ack,
            0x09 => MsgKind::Commit,
            0x0A => MsgKind::Deliver,
            0x0B => MsgKind::DiscoveryRequest,
            0x0C => MsgKind::History,
            _ => return None,
        })
    }

    /// Kinds that drive reconfiguration and view discovery.
    pub fn is_membership(self) -> bool {
        !matches!(self, MsgKind::Prepare | MsgKind::Ack | MsgKind::Commit | MsgKind::Deliver)
    }
}

/// Instruction to move from `replaced` towards `seq`, installing `omega` first.
/// Justified by a quorum of CONVERGED messages from members of `replaced`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstallMessage {
    pub omega: View,
    pub seq: ViewSequence,
    pub replaced: View,
    pub proofs: Vec<SignedMessage>,
}

/// A COMMIT a process has stored: payload, certificate and the view it arrived in.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StoredCommit {
    pub payload: Payload,
    pub certificate: MessageCertificate,
    pub view: View,
}

/// The broadcast state a process hands over during a view change.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateRecord {
    /// The first PREPARE this process acknowledged.
    pub ack: Option<SignedMessage>,
    /// Two PREPAREs from the sender for different payloads.
    pub conflicting: Option<(SignedMessage, SignedMessage)>,
    pub stored: Option<StoredCommit>,
}

/// One process's contribution to a view change, signed by that process.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateUpdate {
    pub origin: ProcessId,
    pub replaced: View,
    pub omega: View,
    pub record: StateRecord,
    /// Signed RECONFIG messages still pending at the origin.
    pub requests: Vec<SignedMessage>,
    pub signature: Signature,
}

/// A chain of installs starting at the initial view.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewHistory {
    pub initial: View,
    pub links: Vec<InstallMessage>,
}

impl ViewHistory {
    pub fn last(&self) -> &View {
        self.links.last().map(|l| &l.omega).unwrap_or(&self.initial)
    }

    pub fn views(&self) -> impl Iterator<Item = &View> {
        std::iter::once(&self.initial).chain(self.links.iter().map(|l| &l.omega))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Body {
    Reconfig { change: Change, view: View },
    RecConfirm { view: View },
    Propose { seq: ViewSequence, view: View, evidence: Vec<SignedMessage> },
    Converged { seq: ViewSequence, view: View },
    Install { psi: BTreeSet<ProcessId>, install: InstallMessage },
    StateUpdate { psi: BTreeSet<ProcessId>, update: Box<StateUpdate> },
    Prepare { payload: Payload, view: View },
    Ack { payload: Payload, signature: Signature, view: View },
    Commit { payload: Payload, certificate: MessageCertificate, view: View },
    Deliver { payload: Payload, view: View },
    DiscoveryRequest,
    History(ViewHistory),
}

impl Body {
    pub fn kind(&self) -> MsgKind {
        match self {
            Body::Reconfig { .. } => MsgKind::Reconfig,
            Body::RecConfirm { .. } => MsgKind::RecConfirm,
            Body::Propose { .. } => MsgKind::Propose,
            Body::Converged { .. } => MsgKind::Converged,
            Body::Install { .. } => MsgKind::Install,
            Body::StateUpdate { .. } => MsgKind::StateUpdate,
            Body::Prepare { .. } => MsgKind::Prepare,
            Body::Ack { .. } => MsgKind::Ack,
            Body::Commit { .. } => MsgKind::Commit,
            Body::Deliver { .. } => MsgKind::Deliver,
            Body::DiscoveryRequest => MsgKind::DiscoveryRequest,
            Body::History(_) => MsgKind::History,
        }
    }

    /// The view a message is tagged with; for INSTALL and STATE-UPDATE, the replaced view.
    pub fn view(&self) -> Option<&View> {
        match self {
            Body::Reconfig { view, .. }
            | Body::RecConfirm { view }
            | Body::Propose { view, .. }
            | Body::Converged { view, .. }
            | Body::Prepare { view, .. }
            | Body::Ack { view, .. }
            | Body::Commit { view, .. }
            | Body::Deliver { view, .. } => Some(view),
            Body::Install { install, .. } => Some(&install.replaced),
            Body::StateUpdate { update, .. } => Some(&update.replaced),
            Body::DiscoveryRequest => None,
            Body::History(h) => Some(h.last()),
        }
    }

    pub fn payload(&self) -> Option<&Payload> {
        match self {
            Body::Prepare { payload, .. }
            | Body::Ack { payload, .. }
            | Body::Commit { payload, .. }
            | Body::Deliver { payload, .. } => Some(payload),
            _ => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.push(self.kind().tag());
        match self {
            Body::Reconfig { change, view } => {
                out.extend_from_slice(&change.process.0.to_be_bytes());
                out.push(change.sign.byte());
                view.write_canonical(out);
            }
            Body::RecConfirm { view } => view.write_canonical(out),
            Body::Propose { seq, view, evidence } => {
                seq.write_canonical(out);
                view.write_canonical(out);
                write_messages(evidence, out);
            }
            Body::Converged { seq, view } => {
                seq.write_canonical(out);
                view.write_canonical(out);
            }
            Body::Install { psi, install } => {
                write_processes(psi, out);
                write_install(install, out);
            }
            Body::StateUpdate { psi, update } => {
                write_processes(psi, out);
                write_state_update_content(update, out);
                write_signature(&update.signature, out);
            }
            Body::Prepare { payload, view } | Body::Deliver { payload, view } => {
                write_payload(payload, out);
                view.write_canonical(out);
            }
            Body::Ack { payload, signature, view } => {
                write_payload(payload, out);
                write_signature(signature, out);
                view.write_canonical(out);
            }
            Body::Commit { payload, certificate, view } => {
                write_payload(payload, out);
                certificate.write_canonical(out);
                view.write_canonical(out);
            }
            Body::DiscoveryRequest => {}
            Body::History(h) => {
                h.initial.write_canonical(out);
                out.extend_from_slice(&(h.links.len() as u32).to_be_bytes());
                for l in &h.links {
                    write_install(l, out);
                }
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> WireResult<Body> {
        let tag = r.u8()?;
        let kind = MsgKind::from_tag(tag).ok_or(WireError::UnknownTag(tag))?;
        Ok(match kind {
            MsgKind::Reconfig => {
                let process = ProcessId(r.u32()?);
                let b = r.u8()?;
                let sign = Sign::from_byte(b).ok_or(WireError::Invalid("change sign"))?;
                Body::Reconfig { change: Change { process, sign }, view: r.view(DEFAULT_CHANGE_CAP)? }
            }
            MsgKind::RecConfirm => Body::RecConfirm { view: r.view(DEFAULT_CHANGE_CAP)? },
            MsgKind::Propose => {
                let seq = r.sequence()?;
                let view = r.view(DEFAULT_CHANGE_CAP)?;
                let evidence = read_messages(r, "evidence", &[MsgKind::Reconfig])?;
                Body::Propose { seq, view, evidence }
            }
            MsgKind::Converged => Body::Converged { seq: r.sequence()?, view: r.view(DEFAULT_CHANGE_CAP)? },
            MsgKind::Install => {
                let psi = read_processes(r)?;
                Body::Install { psi, install: read_install(r)? }
            }
            MsgKind::StateUpdate => {
                let psi = read_processes(r)?;
                let origin = ProcessId(r.u32()?);
                let replaced = r.view(DEFAULT_CHANGE_CAP)?;
                let omega = r.view(DEFAULT_CHANGE_CAP)?;
                let record = read_record(r)?;
                let requests = read_messages(r, "requests", &[MsgKind::Reconfig])?;
                let signature = read_signature(r)?;
                let update = StateUpdate { origin, replaced, omega, record, requests, signature };
                Body::StateUpdate { psi, update: Box::new(update) }
            }
            MsgKind::Prepare => Body::Prepare { payload: r.payload()?, view: r.view(DEFAULT_CHANGE_CAP)? },
            MsgKind::Deliver => Body::Deliver { payload: r.payload()?, view: r.view(DEFAULT_CHANGE_CAP)? },
            MsgKind::Ack => {
                let payload = r.payload()?;
                let signature = read_signature(r)?;
                Body::Ack { payload, signature, view: r.view(DEFAULT_CHANGE_CAP)? }
            }
            MsgKind::Commit => {
                let payload = r.payload()?;
                let certificate = MessageCertificate::read(r)?;
                Body::Commit { payload, certificate, view: r.view(DEFAULT_CHANGE_CAP)? }
            }
            MsgKind::DiscoveryRequest => Body::DiscoveryRequest,
            MsgKind::History => {
                let initial = r.view(DEFAULT_CHANGE_CAP)?;
                let n = r.count("history links", MAX_NESTED)?;
                let mut links = Vec::with_capacity(n);
                for _ in 0..n {
                    links.push(read_install(r)?);
                }
                Body::History(ViewHistory { initial, links })
            }
        })
    }
}

/// A message body with its author and the author's signature.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignedMessage {
    pub signer: ProcessId,
    pub body: Body,
    pub signature: Signature,
}

impl SignedMessage {
    pub fn sign(key: &SigningKey, body: Body) -> SignedMessage {
        let bytes = signing_bytes(key.id(), &body);
        let signature = key.sign(&bytes);
        SignedMessage { signer: key.id(), body, signature }
    }

    pub fn kind(&self) -> MsgKind {
        self.body.kind()
    }

    /// The outer signature is valid. Nested signatures are checked by the handlers.
    pub fn verify(&self, keyring: &Keyring) -> bool {
        keyring.verify(self.signer, &signing_bytes(self.signer, &self.body), &self.signature)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.push(WIRE_VERSION);
        out.extend_from_slice(&self.signer.0.to_be_bytes());
        self.body.write(out);
        write_signature(&self.signature, out);
    }

    pub fn decode(bytes: &[u8]) -> WireResult<SignedMessage> {
        let mut r = Reader::new(bytes);
        let m = SignedMessage::read(&mut r, None)?;
        if !r.is_empty() {
            return Err(WireError::TrailingBytes);
        }
        Ok(m)
    }

    fn read(r: &mut Reader<'_>, allowed: Option<&[MsgKind]>) -> WireResult<SignedMessage> {
        let version = r.u8()?;
        if version != WIRE_VERSION {
            return Err(WireError::Version(version));
        }
        let signer = ProcessId(r.u32()?);
        if let Some(allowed) = allowed {
            let tag = r.peek_u8()?;
            match MsgKind::from_tag(tag) {
                Some(k) if allowed.contains(&k) => {}
                Some(_) => return Err(WireError::Invalid("nested message kind")),
                None => return Err(WireError::UnknownTag(tag)),
            }
        }
        let body = Body::read(r)?;
        let signature = read_signature(r)?;
        if signature.signer != signer {
            return Err(WireError::Invalid("signature identity"));
        }
        Ok(SignedMessage { signer, body, signature })
    }

    /// Digest of the full encoding.
    pub fn digest(&self) -> Digest {
        digest(&self.encode())
    }
}

/// The bytes covered by a message signature.
pub fn signing_bytes(signer: ProcessId, body: &Body) -> Vec<u8> {
    let mut out = vec![WIRE_VERSION];
    out.extend_from_slice(&signer.0.to_be_bytes());
    body.write(&mut out);
    out
}

/// The bytes covered by the origin signature of a STATE-UPDATE.
pub fn state_update_signing_bytes(update: &StateUpdate) -> Vec<u8> {
    let mut out = b"state-update".to_vec();
    write_state_update_content(update, &mut out);
    out
}

/// Digest identifying an R-multicast payload: the destination set and the content.
pub fn envelope_digest(body: &Body) -> Digest {
    let mut out = Vec::new();
    match body {
        Body::Install { psi, install } => {
            write_processes(psi, &mut out);
            write_install(install, &mut out);
        }
        Body::StateUpdate { psi, update } => {
            write_processes(psi, &mut out);
            write_state_update_content(update, &mut out);
            write_signature(&update.signature, &mut out);
        }
        other => other.write(&mut out),
    }
    digest(&out)
}

fn write_payload(p: &Payload, out: &mut Vec<u8>) {
    out.extend_from_slice(&(p.0.len() as u32).to_be_bytes());
    out.extend_from_slice(&p.0);
}

fn write_processes(ps: &BTreeSet<ProcessId>, out: &mut Vec<u8>) {
    out.extend_from_slice(&(ps.len() as u32).to_be_bytes());
    for p in ps {
        out.extend_from_slice(&p.0.to_be_bytes());
    }
}

fn write_messages(ms: &[SignedMessage], out: &mut Vec<u8>) {
    out.extend_from_slice(&(ms.len() as u32).to_be_bytes());
    for m in ms {
        m.write(out);
    }
}

fn write_install(i: &InstallMessage, out: &mut Vec<u8>) {
    i.omega.write_canonical(out);
    i.seq.write_canonical(out);
    i.replaced.write_canonical(out);
    write_messages(&i.proofs, out);
}

fn write_option_message(m: &Option<SignedMessage>, out: &mut Vec<u8>) {
    match m {
        None => out.push(0),
        Some(m) => {
            out.push(1);
            m.write(out);
        }
    }
}

fn write_record(rec: &StateRecord, out: &mut Vec<u8>) {
    write_option_message(&rec.ack, out);
    match &rec.conflicting {
        None => out.push(0),
        Some((a, b)) => {
            out.push(1);
            a.write(out);
            b.write(out);
        }
    }
    match &rec.stored {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            write_payload(&s.payload, out);
            s.certificate.write_canonical(out);
            s.view.write_canonical(out);
        }
    }
}

fn write_state_update_content(u: &StateUpdate, out: &mut Vec<u8>) {
    out.extend_from_slice(&u.origin.0.to_be_bytes());
    u.replaced.write_canonical(out);
    u.omega.write_canonical(out);
    write_record(&u.record, out);
    write_messages(&u.requests, out);
}

fn read_processes(r: &mut Reader<'_>) -> WireResult<BTreeSet<ProcessId>> {
    let n = r.count("processes", MAX_PROCESSES)?;
    let mut out = BTreeSet::new();
    for _ in 0..n {
        if !out.insert(ProcessId(r.u32()?)) {
            return Err(WireError::Invalid("duplicate process"));
        }
    }
    Ok(out)
}

fn read_messages(r: &mut Reader<'_>, what: &'static str, allowed: &[MsgKind]) -> WireResult<Vec<SignedMessage>> {
    let n = r.count(what, MAX_NESTED)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(SignedMessage::read(r, Some(allowed))?);
    }
    Ok(out)
}

fn read_install(r: &mut Reader<'_>) -> WireResult<InstallMessage> {
    let omega = r.view(DEFAULT_CHANGE_CAP)?;
    let seq = r.sequence()?;
    let replaced = r.view(DEFAULT_CHANGE_CAP)?;
    let proofs = read_messages(r, "proofs", &[MsgKind::Converged])?;
    Ok(InstallMessage { omega, seq, replaced, proofs })
}

fn read_option_message(r: &mut Reader<'_>, allowed: &[MsgKind]) -> WireResult<Option<SignedMessage>> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(SignedMessage::read(r, Some(allowed))?)),
        _ => Err(WireError::Invalid("option flag")),
    }
}

fn read_record(r: &mut Reader<'_>) -> WireResult<StateRecord> {
    let ack = read_option_message(r, &[MsgKind::Prepare])?;
    let conflicting = match r.u8()? {
        0 => None,
        1 => {
            let a = SignedMessage::read(r, Some(&[MsgKind::Prepare]))?;
            let b = SignedMessage::read(r, Some(&[MsgKind::Prepare]))?;
            Some((a, b))
        }
        _ => return Err(WireError::Invalid("option flag")),
    };
    let stored = match r.u8()? {
        0 => None,
        1 => {
            let payload = r.payload()?;
            let certificate = MessageCertificate::read(r)?;
            let view = r.view(DEFAULT_CHANGE_CAP)?;
            Some(StoredCommit { payload, certificate, view })
        }
        _ => return Err(WireError::Invalid("option flag")),
    };
    Ok(StateRecord { ack, conflicting, stored })
}

/// Bounds-checked cursor over an encoded message.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Reader<'a> {
        Reader { bytes, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> WireResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(WireError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn peek_u8(&self) -> WireResult<u8> {
        self.bytes.get(self.pos).copied().ok_or(WireError::Truncated)
    }

    pub fn u8(&mut self) -> WireResult<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> WireResult<u16> {
        Ok(u16::from_be_bytes(self.bytes(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> WireResult<u32> {
        Ok(u32::from_be_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub fn digest(&mut self) -> WireResult<Digest> {
        Ok(Digest(self.bytes(32)?.try_into().expect("32 bytes")))
    }

    /// A `u32` element count, capped and bounded by the bytes left.
    pub fn count(&mut self, what: &'static str, cap: usize) -> WireResult<usize> {
        let n = self.u32()? as usize;
        if n > cap {
            return Err(WireError::TooLarge { what, len: n, cap });
        }
        if n > self.remaining() {
            return Err(WireError::Truncated);
        }
        Ok(n)
    }

    pub fn view(&mut self, cap: usize) -> WireResult<View> {
        let (v, used) = View::read_canonical(&self.bytes[self.pos..], cap)?;
        self.pos += used;
        Ok(v)
    }

    pub fn sequence(&mut self) -> WireResult<ViewSequence> {
        let n = self.count("sequence", MAX_SEQUENCE)?;
        let mut seq = ViewSequence::default();
        for _ in 0..n {
            if !seq.insert(self.view(DEFAULT_CHANGE_CAP)?) {
                return Err(WireError::Invalid("duplicate view in sequence"));
            }
        }
        Ok(seq)
    }

    pub fn payload(&mut self) -> WireResult<Payload> {
        let n = self.u32()? as usize;
        if n > MAX_PAYLOAD {
            return Err(WireError::TooLarge { what: "payload", len: n, cap: MAX_PAYLOAD });
        }
        Ok(Payload(self.bytes(n)?.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{ack_payload, SignatureScheme};

    fn setup() -> (Keyring, Vec<SigningKey>, View) {
        let (kr, keys) = Keyring::generate(SignatureScheme::KeyedDigest, (1..=4).map(ProcessId), 1);
        (kr, keys.into_values().collect(), View::initial((1..=4).map(ProcessId)))
    }

    fn samples() -> Vec<SignedMessage> {
        let (_, keys, v0) = setup();
        let v1 = v0.with([Change::join(ProcessId(5))]);
        let seq = ViewSequence::single(v1.clone());
        let m = Payload::from("m");
        let rc = SignedMessage::sign(&keys[3], Body::Reconfig { change: Change::join(ProcessId(5)), view: v0.clone() });
        let conv = SignedMessage::sign(&keys[0], Body::Converged { seq: seq.clone(), view: v0.clone() });
        let install =
            InstallMessage { omega: v1.clone(), seq: seq.clone(), replaced: v0.clone(), proofs: vec![conv.clone()] };
        let prep = SignedMessage::sign(&keys[0], Body::Prepare { payload: m.clone(), view: v0.clone() });
        let ack = keys[1].sign(&ack_payload(&m.0, &v0));
        let cer = MessageCertificate::assemble(&m.0, v0.clone(), [ack.clone()]);
        let update = StateUpdate {
            origin: ProcessId(2),
            replaced: v0.clone(),
            omega: v1.clone(),
            record: StateRecord {
                ack: Some(prep.clone()),
                conflicting: Some((prep.clone(), prep.clone())),
                stored: Some(StoredCommit { payload: m.clone(), certificate: cer.clone(), view: v0.clone() }),
            },
            requests: vec![rc.clone()],
            signature: keys[1].sign(b"x"),
        };
        let psi: BTreeSet<ProcessId> = (1..=5).map(ProcessId).collect();
        let bodies = vec![
            Body::RecConfirm { view: v0.clone() },
            Body::Propose { seq: seq.clone(), view: v0.clone(), evidence: vec![rc.clone()] },
            Body::Install { psi: psi.clone(), install: install.clone() },
            Body::StateUpdate { psi, update: Box::new(update) },
            Body::Ack { payload: m.clone(), signature: ack, view: v0.clone() },
            Body::Commit { payload: m.clone(), certificate: cer, view: v1.clone() },
            Body::Deliver { payload: m, view: v0.clone() },
            Body::DiscoveryRequest,
            Body::History(ViewHistory { initial: v0, links: vec![install] }),
        ];
        let mut out = vec![rc, conv, prep];
        out.extend(bodies.into_iter().map(|b| SignedMessage::sign(&keys[2], b)));
        out
    }

    #[test]
    fn every_kind_round_trips() {
        let (kr, _, _) = setup();
        let msgs = samples();
        let kinds: BTreeSet<MsgKind> = msgs.iter().map(|m| m.kind()).collect();
        assert_eq!(kinds.len(), 12);
        for m in msgs {
            let bytes = m.encode();
            assert_eq!(bytes[0], WIRE_VERSION);
            assert_eq!(bytes[5], m.kind().tag());
            let back = SignedMessage::decode(&bytes).unwrap();
            assert_eq!(back, m);
            assert!(back.verify(&kr));
        }
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        for m in samples() {
            let bytes = m.encode();
            for cut in 0..bytes.len() {
                assert!(SignedMessage::decode(&bytes[..cut]).is_err(), "{:?} cut {cut}", m.kind());
            }
            let mut extra = bytes.clone();
            extra.push(0);
            assert_eq!(SignedMessage::decode(&extra), Err(WireError::TrailingBytes));
        }
    }

    #[test]
    fn tampering_breaks_signature() {
        let (kr, _, _) = setup();
        let m = &samples()[2];
        let mut bytes = m.encode();
        let i = bytes.len() / 2;
        bytes[i] ^= 0x01;
        if let Ok(t) = SignedMessage::decode(&bytes) {
            assert!(!t.verify(&kr));
        }
    }

    #[test]
    fn version_and_tag_checked() {
        let m = &samples()[0];
        let mut bytes = m.encode();
        bytes[0] = 9;
        assert_eq!(SignedMessage::decode(&bytes), Err(WireError::Version(9)));
        let mut bytes = m.encode();
        bytes[5] = 0x7F;
        assert_eq!(SignedMessage::decode(&bytes), Err(WireError::UnknownTag(0x7F)));
    }

    #[test]
    fn nested_kinds_are_restricted() {
        let (_, keys, v0) = setup();
        let inner = SignedMessage::sign(&keys[0], Body::DiscoveryRequest);
        let outer = SignedMessage::sign(
            &keys[0],
            Body::Propose { seq: ViewSequence::single(v0.clone()), view: v0, evidence: vec![inner] },
        );
        assert_eq!(SignedMessage::decode(&outer.encode()), Err(WireError::Invalid("nested message kind")));
    }
}
