//! View discovery: which views a node trusts and how it learns new ones.
//!
//! A view is trusted when a chain of installs connects it to the initial view,
//! each link justified by a quorum of signed CONVERGED messages from members of
//! the view it replaces. Nodes gossip their longest chain and answer requests
//! from joiners.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::{digest, Digest, Keyring};
use crate::engine::{Disposition, Lifecycle, Node, Note};
use crate::view::{ProcessId, View};
use crate::wire::{Body, InstallMessage, ViewHistory};

/// Structural checks on an install plus its CONVERGED quorum.
pub fn verify_install(keyring: &Keyring, link: &InstallMessage) -> bool {
    let v = &link.replaced;
    if link.seq.is_empty() || !link.seq.is_sequence() {
        return false;
    }
    if link.seq.least_recent().ok() != Some(&link.omega) {
        return false;
    }
    if !link.seq.iter().all(|w| v.precedes(w)) {
        return false;
    }
    let Ok(q) = v.quorum_size() else {
        return false;
    };
    let members = v.members();
    let mut signers = BTreeSet::new();
    for proof in &link.proofs {
        match &proof.body {
            Body::Converged { seq, view } if *seq == link.seq && view == v => {}
            _ => return false,
        }
        if !members.contains(&proof.signer) || !signers.insert(proof.signer) {
            return false;
        }
        if !proof.verify(keyring) {
            return false;
        }
    }
    signers.len() >= q
}

/// `h` starts at `initial` and every link is a valid install of the next view
/// replacing the previous one.
pub fn verify_history(keyring: &Keyring, h: &ViewHistory, initial: &View) -> bool {
    if h.initial != *initial {
        return false;
    }
    let mut prev = initial;
    for link in &h.links {
        if link.replaced != *prev || !verify_install(keyring, link) {
            return false;
        }
        prev = &link.omega;
    }
    true
}

fn link_digest(link: &InstallMessage) -> Digest {
    let body = Body::History(ViewHistory { initial: link.replaced.clone(), links: vec![link.clone()] });
    digest(&body.encode())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct Discovery {
    pub initial: View,
    /// A verified chain from the initial view to each trusted view.
    pub histories: BTreeMap<View, ViewHistory>,
    pub best: View,
    pub verified_links: BTreeSet<Digest>,
    pub divergent: bool,
    /// At least one history arrived since join was invoked.
    pub heard_since_join: bool,
}

impl Discovery {
    pub fn new(initial: View) -> Discovery {
        let mut histories = BTreeMap::new();
        histories.insert(initial.clone(), ViewHistory { initial: initial.clone(), links: vec![] });
        Discovery {
            best: initial.clone(),
            initial,
            histories,
            verified_links: BTreeSet::new(),
            divergent: false,
            heard_since_join: false,
        }
    }

    pub fn trusted(&self, v: &View) -> bool {
        self.histories.contains_key(v)
    }

    pub fn best_history(&self) -> &ViewHistory {
        &self.histories[&self.best]
    }

    /// The most recent trusted view satisfying `pred`.
    pub fn best_where(&self, pred: impl Fn(&View) -> bool) -> Option<&View> {
        self.histories.keys().filter(|v| pred(v)).fold(None, |acc: Option<&View>, v| match acc {
            Some(a) if !a.precedes(v) => Some(a),
            _ => Some(v),
        })
    }

    /// Trusts `link.omega` given that `link` was verified and its replaced view is
    /// trusted. Returns whether anything changed and whether the new view diverges.
    fn adopt(&mut self, link: &InstallMessage) -> Adopted {
        if self.trusted(&link.omega) {
            return Adopted::Known;
        }
        let Some(prefix) = self.histories.get(&link.replaced) else {
            return Adopted::Known;
        };
        let mut h = prefix.clone();
        h.links.push(link.clone());
        let omega = link.omega.clone();
        let diverges = self.histories.keys().any(|v| !v.comparable(&omega));
        self.histories.insert(omega.clone(), h);
        if self.best.precedes(&omega) {
            self.best = omega.clone();
        }
        if diverges {
            self.divergent = true;
            Adopted::Divergent(omega)
        } else {
            Adopted::New(omega)
        }
    }
}

enum Adopted {
    Known,
    New(View),
    Divergent(View),
}

impl Node {
    /// Records an R-delivered, already verified install.
    pub(crate) fn trust_install(&mut self, link: &InstallMessage) {
        self.s.d.verified_links.insert(link_digest(link));
        self.adopt_links(std::slice::from_ref(link));
    }

    fn adopt_links(&mut self, links: &[InstallMessage]) {
        let before = self.s.d.best.clone();
        for link in links {
            match self.s.d.adopt(link) {
                Adopted::Known => {}
                Adopted::New(view) => self.note(Note::Trusted { view }),
                Adopted::Divergent(view) => {
                    self.note(Note::Trusted { view });
                    self.note(Note::Flagged { kind: None, signer: None, reason: "divergent view history" });
                }
            }
        }
        if self.s.d.best != before {
            let h = self.s.d.best_history().clone();
            self.flood(Body::History(h));
        }
    }

    fn verify_history_cached(&mut self, h: &ViewHistory) -> bool {
        if h.initial != self.s.d.initial {
            return false;
        }
        let mut prev = &self.s.d.initial;
        let mut fresh = Vec::new();
        for link in &h.links {
            if link.replaced != *prev {
                return false;
            }
            let d = link_digest(link);
            if !self.s.d.verified_links.contains(&d) {
                if !verify_install(&self.keyring, link) {
                    return false;
                }
                fresh.push(d);
            }
            prev = &link.omega;
        }
        self.s.d.verified_links.extend(fresh);
        true
    }

    pub(crate) fn on_history(&mut self, h: &ViewHistory) -> Disposition {
        if !self.verify_history_cached(h) {
            return Disposition::Flag("unverifiable view history");
        }
        if self.s.lifecycle == Lifecycle::Joining {
            self.s.d.heard_since_join = true;
        }
        self.adopt_links(&h.links);
        Disposition::Done
    }

    pub(crate) fn on_discovery_request(&mut self, from: ProcessId) -> Disposition {
        let h = self.s.d.best_history().clone();
        self.send(from, Body::History(h));
        Disposition::Done
    }
}
