//! Reliable multicast of INSTALL and STATE-UPDATE messages.
//!
//! The first valid copy of an envelope is relayed to every destination and then
//! delivered locally; later copies are ignored. With at most `f` faulty members
//! this gives every correct destination the same set of deliveries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::crypto::Digest;
use crate::discovery::verify_install;
use crate::engine::{Disposition, Node};
use crate::view::ProcessId;
use crate::wire::{envelope_digest, state_update_signing_bytes, Body, InstallMessage, StateUpdate};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub(crate) struct RMulticastState {
    pub received: BTreeSet<Digest>,
}

/// `v.members ∪ ω.members` for an install replacing `v` by `ω`.
pub fn destinations(install: &InstallMessage) -> BTreeSet<ProcessId> {
    let mut psi = install.replaced.members();
    psi.extend(install.omega.members());
    psi
}

impl Node {
    /// Starts an R-multicast of `body` to `psi`, delivering locally through the relay path.
    pub(crate) fn r_multicast(&mut self, psi: BTreeSet<ProcessId>, body: Body) {
        self.send_to_all(psi, body);
    }

    fn relay_and_mark(&mut self, body: &Body, psi: &BTreeSet<ProcessId>) -> bool {
        let d = envelope_digest(body);
        if !self.s.rm.received.insert(d) {
            return false;
        }
        self.send_to_all(psi.iter().copied(), body.clone());
        true
    }

    pub(crate) fn on_install_envelope(
        &mut self,
        body: &Body,
        psi: &BTreeSet<ProcessId>,
        install: &InstallMessage,
    ) -> Disposition {
        if !psi.contains(&self.me()) {
            return Disposition::Drop("not a destination");
        }
        if !self.s.d.trusted(&install.replaced) {
            return Disposition::Defer;
        }
        if self.s.rm.received.contains(&envelope_digest(body)) {
            return Disposition::Done;
        }
        if *psi != destinations(install) {
            return Disposition::Flag("install destinations do not match views");
        }
        if !verify_install(&self.keyring, install) {
            return Disposition::Flag("install lacks a converged quorum");
        }
        if self.relay_and_mark(body, psi) {
            self.trust_install(install);
            self.on_install(install);
        }
        Disposition::Done
    }

    pub(crate) fn on_state_update_envelope(
        &mut self,
        body: &Body,
        psi: &BTreeSet<ProcessId>,
        update: &StateUpdate,
    ) -> Disposition {
        if !psi.contains(&self.me()) {
            return Disposition::Drop("not a destination");
        }
        if self.s.rm.received.contains(&envelope_digest(body)) {
            return Disposition::Done;
        }
        let mut expected = update.replaced.members();
        expected.extend(update.omega.members());
        if *psi != expected || !update.replaced.is_member(update.origin) {
            return Disposition::Flag("state update destinations do not match views");
        }
        let bytes = state_update_signing_bytes(update);
        if !self.keyring.verify(update.origin, &bytes, &update.signature) {
            return Disposition::Flag("invalid state update signature");
        }
        if self.relay_and_mark(body, psi) {
            self.on_state_update(update);
        }
        Disposition::Done
    }
}
