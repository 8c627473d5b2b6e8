//! Reconfiguration: join and leave requests, proposal convergence and view installation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::Signature;
use crate::engine::{Callback, Disposition, Gate, Lifecycle, Node, Note};
use crate::error::EngineError;
use crate::rmulticast::destinations;
use crate::view::{Change, ProcessId, Sign, View, ViewSequence};
use crate::wire::{state_update_signing_bytes, Body, InstallMessage, SignedMessage, StateUpdate};

/// A join or leave request being repeated until a quorum confirms it.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub(crate) struct Request {
    pub active: bool,
    /// Views the request was sent in.
    pub targets: BTreeSet<View>,
    pub confirms: BTreeMap<View, BTreeSet<ProcessId>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub(crate) struct LeaveState {
    pub invoked: bool,
    pub request: Request,
    /// Left the final view with a stored message not yet delivered.
    pub committing: bool,
    pub commit_targets: BTreeSet<View>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub(crate) struct MembershipState {
    pub cv: View,
    pub installed: BTreeSet<View>,
    pub suspended: bool,
    /// Pending requests with their signed RECONFIG evidence.
    pub recv: BTreeMap<Change, SignedMessage>,
    pub seq: BTreeMap<View, ViewSequence>,
    pub lcseq: BTreeMap<View, ViewSequence>,
    pub format: BTreeMap<View, BTreeSet<ViewSequence>>,
    /// First valid RECONFIG seen for each change.
    pub evidence: BTreeMap<Change, SignedMessage>,
    pub propose_votes: BTreeMap<View, BTreeMap<ViewSequence, BTreeSet<ProcessId>>>,
    /// Every view seen in a proposal to replace each view, local or received.
    pub seen: BTreeMap<View, BTreeSet<View>>,
    pub converged_sent: BTreeSet<(View, ViewSequence)>,
    pub converged_votes: BTreeMap<View, BTreeMap<ViewSequence, BTreeMap<ProcessId, SignedMessage>>>,
    pub install_sent: BTreeSet<(View, ViewSequence)>,
    pub processed_installs: BTreeSet<(View, ViewSequence, View)>,
    /// Installs waiting for a quorum of STATE-UPDATEs.
    pub pending_installs: Vec<InstallMessage>,
    pub state_updates: BTreeMap<View, BTreeMap<ProcessId, StateUpdate>>,
    pub join: Request,
    pub join_invoked: bool,
    pub leave: LeaveState,
}

impl MembershipState {
    pub fn new(v0: View, member: bool) -> MembershipState {
        let mut s = MembershipState { cv: v0.clone(), ..Default::default() };
        s.format.insert(v0.clone(), BTreeSet::from([ViewSequence::default()]));
        if member {
            s.installed.insert(v0);
        }
        s
    }

    fn pending_changes(&self) -> Vec<Change> {
        self.recv.keys().filter(|c| !self.cv.contains_change(c)).copied().collect()
    }
}

/// The views of every sequence proposed by a quorum, plus every seen view
/// comparable with all other seen views. When some seen views conflict, the union
/// of all seen views is added as well. The result depends only on the two sets,
/// so members that have seen the same proposals hold the same sequence.
fn merge_proposals(protected: &BTreeSet<View>, seen: &mut BTreeSet<View>) -> ViewSequence {
    seen.extend(protected.iter().cloned());
    let contested: BTreeSet<View> = seen.iter().filter(|w| seen.iter().any(|x| !w.comparable(x))).cloned().collect();
    if !contested.is_empty() {
        let top = seen.iter().skip(1).fold(seen.first().expect("conflict needs views").clone(), |acc, w| acc.union(w));
        seen.insert(top);
    }
    let mut out: ViewSequence = protected.iter().cloned().collect();
    for w in seen.iter().filter(|w| !contested.contains(*w)) {
        out.insert(w.clone());
    }
    out
}

/// A RECONFIG whose request is still meaningful in `v`.
fn reconfig_allowed(change: Change, v: &View) -> bool {
    !v.contains_change(&change) && (change.sign == Sign::Plus || v.contains_change(&Change::join(change.process)))
}

impl Node {
    pub(crate) fn invoke_join(&mut self) -> Result<(), EngineError> {
        if self.s.m.join_invoked {
            return Err(EngineError::JoinTwice);
        }
        if self.s.lifecycle != Lifecycle::Dormant {
            return Err(EngineError::AlreadyMember);
        }
        self.s.m.join_invoked = true;
        self.s.m.join.active = true;
        self.s.lifecycle = Lifecycle::Joining;
        self.s.d.heard_since_join = false;
        self.flood(Body::DiscoveryRequest);
        Ok(())
    }

    pub(crate) fn invoke_leave(&mut self) -> Result<(), EngineError> {
        if self.s.lifecycle != Lifecycle::Member {
            return Err(EngineError::NotParticipant("leave"));
        }
        if self.s.m.leave.invoked {
            return Err(EngineError::LeaveTwice);
        }
        self.s.m.leave.invoked = true;
        Ok(())
    }

    pub(crate) fn on_reconfig(&mut self, msg: &SignedMessage, change: Change, v: &View) -> Disposition {
        if change.process != msg.signer {
            return Disposition::Flag("reconfig for another process");
        }
        match self.gate(v) {
            Gate::Wait => return Disposition::Defer,
            Gate::Drop(r) => return Disposition::Drop(r),
            Gate::Process => {}
        }
        self.s.m.evidence.entry(change).or_insert_with(|| msg.clone());
        if !reconfig_allowed(change, v) {
            return Disposition::Drop("request already reflected in view");
        }
        self.s.m.recv.insert(change, msg.clone());
        let cv = self.s.m.cv.clone();
        self.send(msg.signer, Body::RecConfirm { view: cv });
        Disposition::Done
    }

    pub(crate) fn on_rec_confirm(&mut self, from: ProcessId, v: &View) -> Disposition {
        if !v.is_member(from) {
            return Disposition::Drop("confirmation from non-member");
        }
        let Ok(q) = v.quorum_size() else {
            return Disposition::Drop("empty view");
        };
        for req in [&mut self.s.m.join, &mut self.s.m.leave.request] {
            if req.active && req.targets.contains(v) {
                let c = req.confirms.entry(v.clone()).or_default();
                c.insert(from);
                if c.len() >= q {
                    req.active = false;
                }
            }
        }
        Disposition::Done
    }

    /// Checks that every change beyond `v` is backed by a signed request.
    fn check_evidence(&mut self, seq: &ViewSequence, v: &View, evidence: &[SignedMessage]) -> bool {
        let mut supplied: BTreeMap<Change, &SignedMessage> = BTreeMap::new();
        for e in evidence {
            if let Body::Reconfig { change, .. } = &e.body {
                if change.process == e.signer {
                    supplied.entry(*change).or_insert(e);
                }
            }
        }
        let needed: BTreeSet<Change> =
            seq.iter().flat_map(|w| w.changes().iter()).filter(|c| !v.contains_change(c)).copied().collect();
        for c in needed {
            if self.s.m.evidence.contains_key(&c) {
                continue;
            }
            match supplied.get(&c) {
                Some(e) if e.verify(&self.keyring) => {
                    self.s.m.evidence.insert(c, (*e).clone());
                }
                _ => return false,
            }
        }
        true
    }

    fn evidence_for(&self, seq: &ViewSequence, v: &View) -> Vec<SignedMessage> {
        let changes: BTreeSet<Change> =
            seq.iter().flat_map(|w| w.changes().iter()).filter(|c| !v.contains_change(c)).copied().collect();
        changes.iter().filter_map(|c| self.s.m.evidence.get(c).cloned()).collect()
    }

    fn send_propose(&mut self, v: &View) {
        let seq = self.s.m.seq.get(v).cloned().unwrap_or_default();
        self.s.m.seen.entry(v.clone()).or_default().extend(seq.iter().cloned());
        let evidence = self.evidence_for(&seq, v);
        self.note(Note::Proposed { view: v.clone(), seq: seq.clone() });
        self.disseminate(v, Body::Propose { seq, view: v.clone(), evidence });
    }

    pub(crate) fn on_propose(
        &mut self,
        from: ProcessId,
        seq: &ViewSequence,
        v: &View,
        evidence: &[SignedMessage],
    ) -> Disposition {
        if !self.s.d.trusted(v) {
            return Disposition::Defer;
        }
        if !v.is_member(self.me()) {
            return Disposition::Drop("not a member of the view");
        }
        if !v.is_member(from) {
            return Disposition::Flag("proposal from non-member");
        }
        if seq.is_empty() || !seq.is_sequence() {
            return Disposition::Flag("proposal is not a sequence");
        }
        if !self.check_evidence(seq, v, evidence) {
            return Disposition::Flag("proposal lacks signed requests");
        }
        let format = self.s.m.format.get(v);
        let admitted = format.is_some_and(|f| f.contains(seq) || f.contains(&ViewSequence::default()));
        if !admitted {
            return Disposition::Defer;
        }
        let votes = self.s.m.propose_votes.entry(v.clone()).or_default().entry(seq.clone()).or_default();
        let before = votes.iter().filter(|p| v.is_member(**p)).count();
        votes.insert(from);
        let q = v.quorum_size().unwrap_or(usize::MAX);
        let reached_quorum = before < q && votes.iter().filter(|p| v.is_member(**p)).count() >= q;

        let cv = &self.s.m.cv;
        if !seq.iter().all(|w| cv.precedes(w) && v.precedes(w)) {
            return Disposition::Drop("proposal not more recent");
        }
        if !self.holds_unseen_view(seq, v) && !reached_quorum {
            return Disposition::Drop("proposal holds no new view");
        }
        let protected: BTreeSet<View> = self.s.m.propose_votes[v]
            .iter()
            .filter(|(_, voters)| voters.iter().filter(|p| v.is_member(**p)).count() >= q)
            .flat_map(|(s, _)| s.iter().cloned())
            .chain(self.s.m.lcseq.get(v).into_iter().flat_map(|s| s.iter().cloned()))
            .collect();
        let seen = self.s.m.seen.entry(v.clone()).or_default();
        seen.extend(seq.iter().cloned());
        let merged = merge_proposals(&protected, seen);
        if self.s.m.seq.get(v) != Some(&merged) {
            self.s.m.seq.insert(v.clone(), merged);
            self.send_propose(v);
        }
        Disposition::Done
    }

    /// Some view of `seq` was never seen in a proposal for `v`.
    fn holds_unseen_view(&self, seq: &ViewSequence, v: &View) -> bool {
        let m = &self.s.m;
        let seen = m.seen.get(v);
        seq.iter().any(|w| !(seen.is_some_and(|s| s.contains(w)) || *w == m.cv || m.installed.contains(w)))
    }

    pub(crate) fn on_converged(&mut self, msg: &SignedMessage, seq: &ViewSequence, v: &View) -> Disposition {
        if !self.s.d.trusted(v) {
            return Disposition::Defer;
        }
        if !v.is_member(msg.signer) {
            return Disposition::Flag("converged from non-member");
        }
        if seq.is_empty() || !seq.is_sequence() || !seq.iter().all(|w| v.precedes(w)) {
            return Disposition::Flag("converged on an invalid sequence");
        }
        self.s
            .m
            .converged_votes
            .entry(v.clone())
            .or_default()
            .entry(seq.clone())
            .or_default()
            .entry(msg.signer)
            .or_insert_with(|| msg.clone());
        Disposition::Done
    }

    /// Algorithm entry for an R-delivered INSTALL.
    pub(crate) fn on_install(&mut self, install: &InstallMessage) {
        let key = (install.omega.clone(), install.seq.clone(), install.replaced.clone());
        if !self.s.m.processed_installs.insert(key) {
            return;
        }
        let InstallMessage { omega, seq, replaced: v, .. } = install;
        self.note(Note::InstallAccepted { omega: omega.clone(), seq: seq.clone(), replaced: v.clone() });
        self.s.m.format.entry(omega.clone()).or_default().insert(seq.without(omega));

        let ahead = self.s.m.cv.precedes(omega);
        if v.is_member(self.me()) {
            if ahead && !self.s.m.suspended {
                self.s.m.suspended = true;
                self.note(Note::Suspended { view: self.s.m.cv.clone() });
            }
            self.send_state_update(v, omega);
        }
        if ahead {
            self.s.m.pending_installs.push(install.clone());
        }
    }

    fn send_state_update(&mut self, v: &View, omega: &View) {
        let record = self.state_for(v);
        let requests: Vec<SignedMessage> =
            self.s.m.recv.values().filter(|m| m.body.view().is_some_and(|rv| rv.is_subset(v))).cloned().collect();
        let mut update = StateUpdate {
            origin: self.me(),
            replaced: v.clone(),
            omega: omega.clone(),
            record,
            requests,
            signature: Signature { signer: self.me(), bytes: Vec::new() },
        };
        update.signature = self.key.sign(&state_update_signing_bytes(&update));
        let mut psi = v.members();
        psi.extend(omega.members());
        self.r_multicast(psi.clone(), Body::StateUpdate { psi, update: Box::new(update) });
    }

    pub(crate) fn on_state_update(&mut self, update: &StateUpdate) {
        self.s
            .m
            .state_updates
            .entry(update.replaced.clone())
            .or_default()
            .entry(update.origin)
            .or_insert_with(|| update.clone());
    }

    /// Continues installs whose STATE-UPDATE quorum is complete.
    fn poll_installs(&mut self) -> bool {
        let mut progressed = false;
        let mut i = 0;
        while i < self.s.m.pending_installs.len() {
            let install = &self.s.m.pending_installs[i];
            let v = &install.replaced;
            let q = v.quorum_size().unwrap_or(usize::MAX);
            let have = self.s.m.state_updates.get(v).map_or(0, |u| u.keys().filter(|p| v.is_member(**p)).count());
            if have >= q {
                let install = self.s.m.pending_installs.remove(i);
                self.complete_install(&install);
                progressed = true;
                if self.s.lifecycle == Lifecycle::Halted {
                    return true;
                }
            } else {
                i += 1;
            }
        }
        progressed
    }

    fn complete_install(&mut self, install: &InstallMessage) {
        let InstallMessage { omega, seq, replaced: v, .. } = install;
        if !self.s.m.cv.precedes(omega) {
            // Overtaken by another install while waiting.
            return;
        }
        let updates: Vec<StateUpdate> =
            self.s.m.state_updates[v].iter().filter(|(p, _)| v.is_member(**p)).map(|(_, u)| u.clone()).collect();
        for u in &updates {
            for r in &u.requests {
                if let Body::Reconfig { change, .. } = &r.body {
                    if r.signer == change.process && !omega.contains_change(change) && r.verify(&self.keyring) {
                        self.s.m.evidence.entry(*change).or_insert_with(|| r.clone());
                        self.s.m.recv.entry(*change).or_insert_with(|| r.clone());
                    }
                }
            }
        }
        self.s.m.installed.remove(omega);
        let records: Vec<_> = updates.into_iter().map(|u| u.record).collect();
        self.state_transfer(&records, v);

        if omega.is_member(self.me()) {
            self.s.m.cv = omega.clone();
            let cv = omega.clone();
            self.s.m.recv.retain(|c, _| !cv.contains_change(c));
            self.note(Note::ViewAdopted { view: cv.clone() });
            if !v.is_member(self.me()) && self.s.lifecycle == Lifecycle::Joining {
                self.s.lifecycle = Lifecycle::Member;
                self.s.m.join.active = false;
                self.callback(Callback::JoinComplete);
            }
            let newer = seq.after(&cv);
            if !newer.is_empty() {
                if self.s.m.seq.get(&cv).is_none_or(|s| s.is_empty()) {
                    self.s.m.seq.insert(cv.clone(), newer);
                    self.send_propose(&cv);
                }
            } else {
                self.s.m.installed.insert(cv.clone());
                self.s.m.suspended = false;
                self.note(Note::Installed { view: cv });
                self.new_view();
            }
        } else if self.s.b.stored.is_some() {
            self.s.m.leave.committing = true;
            self.flood(Body::DiscoveryRequest);
        } else {
            self.finish_leave();
        }
    }

    fn finish_leave(&mut self) {
        self.callback(Callback::LeaveComplete);
        self.halt();
    }

    pub(crate) fn poll_membership(&mut self) -> bool {
        if !self.may_send() {
            return false;
        }
        let mut progressed = self.poll_installs();
        if self.s.lifecycle == Lifecycle::Halted {
            return true;
        }
        progressed |= self.maybe_propose();
        progressed |= self.poll_propose_quorum();
        progressed |= self.poll_converged_quorum();
        progressed |= self.poll_join();
        progressed |= self.poll_leave();
        progressed
    }

    fn maybe_propose(&mut self) -> bool {
        let cv = self.s.m.cv.clone();
        if !cv.is_member(self.me()) || !self.s.m.installed.contains(&cv) {
            return false;
        }
        if self.s.m.seq.get(&cv).is_some_and(|s| !s.is_empty()) {
            return false;
        }
        let pending = self.s.m.pending_changes();
        if pending.is_empty() {
            return false;
        }
        self.s.m.seq.insert(cv.clone(), ViewSequence::single(cv.with(pending)));
        self.send_propose(&cv);
        true
    }

    fn poll_propose_quorum(&mut self) -> bool {
        let mut ready = Vec::new();
        for (v, by_seq) in &self.s.m.propose_votes {
            let Some(local) = self.s.m.seq.get(v) else {
                continue;
            };
            if local.is_empty() || self.s.m.converged_sent.contains(&(v.clone(), local.clone())) {
                continue;
            }
            let Some(voters) = by_seq.get(local) else {
                continue;
            };
            let q = v.quorum_size().unwrap_or(usize::MAX);
            if voters.iter().filter(|p| v.is_member(**p)).count() >= q {
                ready.push((v.clone(), local.clone()));
            }
        }
        for (v, seq) in &ready {
            self.s.m.converged_sent.insert((v.clone(), seq.clone()));
            self.s.m.lcseq.insert(v.clone(), seq.clone());
            self.disseminate(v, Body::Converged { seq: seq.clone(), view: v.clone() });
        }
        !ready.is_empty()
    }

    fn poll_converged_quorum(&mut self) -> bool {
        let mut ready = Vec::new();
        for (v, by_seq) in &self.s.m.converged_votes {
            let q = v.quorum_size().unwrap_or(usize::MAX);
            for (seq, proofs) in by_seq {
                if proofs.len() >= q && !self.s.m.install_sent.contains(&(v.clone(), seq.clone())) {
                    let proofs: Vec<SignedMessage> = proofs.values().take(q).cloned().collect();
                    ready.push((v.clone(), seq.clone(), proofs));
                }
            }
        }
        for (v, seq, proofs) in &ready {
            self.s.m.install_sent.insert((v.clone(), seq.clone()));
            self.note(Note::ConvergedOn { replaced: v.clone(), seq: seq.clone() });
            let omega = seq.least_recent().expect("checked on receipt").clone();
            let install = InstallMessage { omega, seq: seq.clone(), replaced: v.clone(), proofs: proofs.clone() };
            let psi = destinations(&install);
            self.r_multicast(psi.clone(), Body::Install { psi, install });
        }
        !ready.is_empty()
    }

    fn poll_join(&mut self) -> bool {
        if self.s.lifecycle != Lifecycle::Joining || !self.s.m.join.active || !self.s.d.heard_since_join {
            return false;
        }
        let me = self.me();
        let Some(target) = self.s.d.best_where(|v| !v.contains_change(&Change::join(me))).cloned() else {
            return false;
        };
        if self.s.m.join.targets.contains(&target) {
            return false;
        }
        if self.s.m.cv.precedes(&target) {
            self.s.m.cv = target.clone();
            self.note(Note::ViewAdopted { view: target.clone() });
        }
        self.s.m.join.targets.insert(target.clone());
        self.disseminate(&target, Body::Reconfig { change: Change::join(me), view: target.clone() });
        true
    }

    fn poll_leave(&mut self) -> bool {
        let mut progressed = false;
        let me = self.me();
        let leave = &self.s.m.leave;
        if leave.invoked && !leave.request.active && leave.request.targets.is_empty() {
            let waits = self.s.b.delivered.is_some() || (self.is_sender() && self.s.b.payload.is_some());
            if !waits || self.s.b.can_leave {
                self.s.m.leave.request.active = true;
                progressed = true;
            }
        }
        let cv = self.s.m.cv.clone();
        let leave = &self.s.m.leave;
        if leave.request.active
            && cv.is_member(me)
            && self.s.m.installed.contains(&cv)
            && !leave.request.targets.contains(&cv)
        {
            self.s.m.leave.request.targets.insert(cv.clone());
            self.disseminate(&cv, Body::Reconfig { change: Change::leave(me), view: cv.clone() });
            progressed = true;
        }
        if self.s.m.leave.committing {
            if self.s.b.can_leave {
                self.finish_leave();
                return true;
            }
            let best = self.s.d.best.clone();
            if !self.s.m.leave.commit_targets.contains(&best) {
                self.s.m.leave.commit_targets.insert(best.clone());
                if self.s.m.cv.precedes(&best) {
                    self.s.m.cv = best.clone();
                    self.note(Note::ViewAdopted { view: best.clone() });
                }
                let stored = self.s.b.stored.clone().expect("committing implies stored");
                self.send_commit_as_leaver(&best, stored);
                progressed = true;
            }
        }
        progressed
    }
}
