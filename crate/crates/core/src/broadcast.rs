//! The broadcast layer: PREPARE, ACK, COMMIT and DELIVER, plus the state handed
//! over when views change.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{ack_payload, verify_certificate, MessageCertificate, Signature};
use crate::engine::{Callback, Disposition, Gate, Lifecycle, Node, Note};
use crate::error::EngineError;
use crate::view::{ProcessId, View};
use crate::wire::{Body, Payload, SignedMessage, StateRecord, StoredCommit};

/// Which payload this node may still acknowledge.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllowedAck {
    /// Nothing acknowledged yet.
    #[default]
    Any,
    Only(Payload),
    /// The sender was caught equivocating.
    Nothing,
}

impl AllowedAck {
    fn permits(&self, m: &Payload) -> bool {
        match self {
            AllowedAck::Any => true,
            AllowedAck::Only(x) => x == m,
            AllowedAck::Nothing => false,
        }
    }

    fn label(&self) -> String {
        match self {
            AllowedAck::Any => "any".into(),
            AllowedAck::Only(m) => format!("only:{}", m.digest()),
            AllowedAck::Nothing => "none".into(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub(crate) struct BroadcastState {
    /// The payload this node broadcast, if it is the sender.
    pub payload: Option<Payload>,
    pub cer: Option<(Payload, MessageCertificate)>,
    pub allowed: AllowedAck,
    pub stored: Option<StoredCommit>,
    pub can_leave: bool,
    pub delivered: Option<Payload>,
    pub acks: BTreeMap<View, BTreeMap<ProcessId, (Payload, Signature)>>,
    pub delivers: BTreeMap<View, BTreeMap<ProcessId, Payload>>,
    pub record: StateRecord,
}

impl Node {
    pub(crate) fn invoke_broadcast(&mut self, m: Payload) -> Result<(), EngineError> {
        if !self.is_sender() {
            return Err(EngineError::NotSender);
        }
        if self.s.lifecycle != Lifecycle::Member {
            return Err(EngineError::NotParticipant("broadcast"));
        }
        if self.s.b.payload.is_some() {
            return Err(EngineError::BroadcastTwice);
        }
        self.s.b.payload = Some(m.clone());
        let cv = self.s.m.cv.clone();
        if self.s.m.installed.contains(&cv) {
            self.disseminate(&cv, Body::Prepare { payload: m, view: cv.clone() });
        }
        Ok(())
    }

    fn set_allowed(&mut self, a: AllowedAck) {
        if self.s.b.allowed != a {
            self.note(Note::AllowedAck { allowed: a.label() });
            self.s.b.allowed = a;
        }
    }

    pub(crate) fn on_prepare(&mut self, msg: &SignedMessage, m: &Payload, v: &View) -> Disposition {
        let s = self.s.cfg.sender;
        if msg.signer != s {
            return Disposition::Flag("prepare not from the sender");
        }
        if !v.is_member(s) {
            return Disposition::Flag("prepare from a sender outside the view");
        }
        match self.gate(v) {
            Gate::Wait => return Disposition::Defer,
            Gate::Drop(r) => return Disposition::Drop(r),
            Gate::Process => {}
        }
        if !self.s.b.allowed.permits(m) {
            return Disposition::Drop("acknowledgement not allowed");
        }
        self.set_allowed(AllowedAck::Only(m.clone()));
        self.s.b.record.ack.get_or_insert_with(|| msg.clone());
        let cv = self.s.m.cv.clone();
        let signature = self.key.sign(&ack_payload(&m.0, &cv));
        self.send(s, Body::Ack { payload: m.clone(), signature, view: cv });
        Disposition::Done
    }

    pub(crate) fn on_ack(&mut self, q: ProcessId, m: &Payload, sig: &Signature, v: &View) -> Disposition {
        if !self.is_sender() {
            return Disposition::Drop("ack at a non-sender");
        }
        if !self.s.d.trusted(v) {
            return Disposition::Defer;
        }
        if !v.is_member(q) {
            return Disposition::Flag("ack from non-member");
        }
        if sig.signer != q || !self.keyring.verify(q, &ack_payload(&m.0, v), sig) {
            return Disposition::Flag("invalid ack signature");
        }
        self.s.b.acks.entry(v.clone()).or_default().entry(q).or_insert_with(|| (m.clone(), sig.clone()));
        Disposition::Done
    }

    pub(crate) fn on_commit(&mut self, q: ProcessId, m: &Payload, cer: &MessageCertificate, v: &View) -> Disposition {
        match self.gate(v) {
            Gate::Wait => return Disposition::Defer,
            Gate::Drop(r) => return Disposition::Drop(r),
            Gate::Process => {}
        }
        let v_cer = &cer.view;
        if !self.s.d.trusted(v_cer) || !verify_certificate(&self.keyring, cer, v_cer, &m.0) {
            return Disposition::Flag("invalid message certificate");
        }
        self.note(Note::CommitAccepted { payload: m.digest(), v_cer: v_cer.clone(), view: v.clone() });
        let cv = self.s.m.cv.clone();
        if self.s.b.stored.is_none() {
            let stored = StoredCommit { payload: m.clone(), certificate: cer.clone(), view: v.clone() };
            self.s.b.stored = Some(stored.clone());
            self.s.b.record.stored.get_or_insert(stored);
            self.note(Note::Stored { payload: m.digest(), v_cer: v_cer.clone() });
            self.disseminate(&cv, Body::Commit { payload: m.clone(), certificate: cer.clone(), view: cv.clone() });
        }
        self.send(q, Body::Deliver { payload: m.clone(), view: cv });
        Disposition::Done
    }

    pub(crate) fn on_deliver(&mut self, q: ProcessId, m: &Payload, v: &View) -> Disposition {
        if !self.s.d.trusted(v) {
            return Disposition::Defer;
        }
        if !v.is_member(q) {
            return Disposition::Flag("deliver from non-member");
        }
        self.s.b.delivers.entry(v.clone()).or_default().entry(q).or_insert_with(|| m.clone());
        Disposition::Done
    }

    pub(crate) fn poll_broadcast(&mut self) -> bool {
        if !self.may_send() {
            return false;
        }
        self.poll_certificate() | self.poll_delivery()
    }

    fn poll_certificate(&mut self) -> bool {
        if !self.is_sender() || self.s.b.cer.is_some() {
            return false;
        }
        let mut found = None;
        'views: for (v, acks) in &self.s.b.acks {
            let q = v.quorum_size().unwrap_or(usize::MAX);
            let mut by_payload: BTreeMap<&Payload, Vec<Signature>> = BTreeMap::new();
            for (p, (m, sig)) in acks {
                if v.is_member(*p) {
                    by_payload.entry(m).or_default().push(sig.clone());
                }
            }
            for (m, sigs) in by_payload {
                if sigs.len() >= q {
                    found = Some((m.clone(), MessageCertificate::assemble(&m.0, v.clone(), sigs)));
                    break 'views;
                }
            }
        }
        let Some((m, cer)) = found else {
            return false;
        };
        self.note(Note::CertificateCollected { payload: m.digest(), v_cer: cer.view.clone() });
        self.s.b.cer = Some((m.clone(), cer.clone()));
        let cv = self.s.m.cv.clone();
        if self.s.m.installed.contains(&cv) {
            self.disseminate(&cv, Body::Commit { payload: m, certificate: cer, view: cv.clone() });
        }
        true
    }

    fn poll_delivery(&mut self) -> bool {
        if self.s.b.delivered.is_some() {
            return false;
        }
        let mut found = None;
        'views: for (v, delivers) in &self.s.b.delivers {
            let q = v.quorum_size().unwrap_or(usize::MAX);
            let mut counts: BTreeMap<&Payload, usize> = BTreeMap::new();
            for (p, m) in delivers {
                if v.is_member(*p) {
                    *counts.entry(m).or_default() += 1;
                }
            }
            for (m, n) in counts {
                if n >= q {
                    found = Some(m.clone());
                    break 'views;
                }
            }
        }
        let Some(m) = found else {
            return false;
        };
        self.s.b.delivered = Some(m.clone());
        self.s.b.can_leave = true;
        self.callback(Callback::Delivered(m));
        true
    }

    /// The broadcast state restricted to messages from views contained in `v`.
    pub(crate) fn state_for(&self, v: &View) -> StateRecord {
        let in_v = |m: &SignedMessage| m.body.view().is_some_and(|w| w.is_subset(v));
        let r = &self.s.b.record;
        StateRecord {
            ack: r.ack.clone().filter(in_v),
            conflicting: r.conflicting.clone().filter(|(a, b)| in_v(a) && in_v(b)),
            stored: r.stored.clone().filter(|s| s.view.is_subset(v)),
        }
    }

    /// A PREPARE signed by the sender, tagged with a view contained in `v`.
    fn valid_prepare<'a>(&self, msg: &'a SignedMessage, v: &View) -> Option<&'a Payload> {
        match &msg.body {
            Body::Prepare { payload, view }
                if msg.signer == self.s.cfg.sender && view.is_subset(v) && msg.verify(&self.keyring) =>
            {
                Some(payload)
            }
            _ => None,
        }
    }

    fn valid_stored(&self, s: &StoredCommit, v: &View) -> bool {
        let v_cer = &s.certificate.view;
        s.view.is_subset(v)
            && self.s.d.trusted(v_cer)
            && verify_certificate(&self.keyring, &s.certificate, v_cer, &s.payload.0)
    }

    /// Merges the states collected for the view change away from `v`.
    pub(crate) fn state_transfer(&mut self, records: &[StateRecord], v: &View) {
        let mut acked: BTreeMap<Payload, SignedMessage> = BTreeMap::new();
        let mut conflict: Option<(SignedMessage, SignedMessage)> = None;
        let mut stored: Option<StoredCommit> = None;
        let mut invalid = 0;
        for r in records {
            if let Some(a) = &r.ack {
                match self.valid_prepare(a, v) {
                    Some(m) => {
                        acked.entry(m.clone()).or_insert_with(|| a.clone());
                    }
                    None => invalid += 1,
                }
            }
            if let Some((a, b)) = &r.conflicting {
                match (self.valid_prepare(a, v), self.valid_prepare(b, v)) {
                    (Some(x), Some(y)) if x != y => {
                        conflict.get_or_insert_with(|| (a.clone(), b.clone()));
                    }
                    _ => invalid += 1,
                }
            }
            if let Some(s) = &r.stored {
                if self.valid_stored(s, v) {
                    stored.get_or_insert_with(|| s.clone());
                } else {
                    invalid += 1;
                }
            }
        }
        for _ in 0..invalid {
            self.note(Note::Flagged { kind: None, signer: None, reason: "invalid entry in transferred state" });
        }

        let only = match acked.iter().next() {
            Some((m, prepare)) if acked.len() == 1 && self.s.b.allowed.permits(m) => Some((m.clone(), prepare.clone())),
            _ => None,
        };
        if let Some((m, prepare)) = only {
            self.set_allowed(AllowedAck::Only(m));
            self.s.b.record.ack.get_or_insert(prepare);
        } else if acked.len() >= 2 {
            let mut it = acked.values();
            let pair = (it.next().expect("two").clone(), it.next().expect("two").clone());
            self.set_allowed(AllowedAck::Nothing);
            self.s.b.record.conflicting.get_or_insert(pair);
            self.s.b.record.ack = None;
        } else if let Some(pair) = conflict {
            self.set_allowed(AllowedAck::Nothing);
            self.s.b.record.conflicting.get_or_insert(pair);
            self.s.b.record.ack = None;
        }

        if self.s.b.stored.is_none() {
            if let Some(s) = stored {
                self.note(Note::Stored { payload: s.payload.digest(), v_cer: s.certificate.view.clone() });
                self.s.b.stored = Some(s.clone());
                self.s.b.record.stored.get_or_insert(s);
            }
        }
    }

    /// Re-sends what is still outstanding after installing a view.
    pub(crate) fn new_view(&mut self) {
        let cv = self.s.m.cv.clone();
        let b = &self.s.b;
        let body = if self.is_sender() && b.cer.is_none() {
            b.payload.clone().map(|m| Body::Prepare { payload: m, view: cv.clone() })
        } else if let (Some((m, cer)), false) = (&b.cer, b.can_leave) {
            Some(Body::Commit { payload: m.clone(), certificate: cer.clone(), view: cv.clone() })
        } else if let (Some(s), false) = (&b.stored, b.can_leave) {
            Some(Body::Commit { payload: s.payload.clone(), certificate: s.certificate.clone(), view: cv.clone() })
        } else {
            None
        };
        if let Some(body) = body {
            self.disseminate(&cv, body);
        }
    }

    pub(crate) fn send_commit_as_leaver(&mut self, target: &View, s: StoredCommit) {
        let body = Body::Commit { payload: s.payload, certificate: s.certificate, view: target.clone() };
        self.disseminate(target, body);
    }
}
