//! Mechanical verification of a finished trace.
//!
//! Correct processes are those with the `Correct` role. A process has joined
//! once it is an initial member or has fired `JoinComplete`, and is a
//! participant from then until it invokes Leave. It has left once it fires
//! `LeaveComplete`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use dbrb_core::{Digest, MsgKind, ProcessId, View};
use serde::{Deserialize, Serialize};

use crate::scenario::Scenario;
use crate::trace::{EventKind, Trace, TraceError, TraceEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Property {
    Validity,
    Totality,
    NoDuplication,
    Integrity,
    Consistency,
    Liveness,
    NonTriviality,
    InstalledViewsChain,
    ValidViewsComparable,
    ConvergedTotalOrder,
}

impl Property {
    pub const ALL: [Property; 10] = [
        Property::Validity,
        Property::Totality,
        Property::NoDuplication,
        Property::Integrity,
        Property::Consistency,
        Property::Liveness,
        Property::NonTriviality,
        Property::InstalledViewsChain,
        Property::ValidViewsComparable,
        Property::ConvergedTotalOrder,
    ];

    /// The seven broadcast properties, as opposed to the structural ones.
    pub const BROADCAST: [Property; 7] = [
        Property::Validity,
        Property::Totality,
        Property::NoDuplication,
        Property::Integrity,
        Property::Consistency,
        Property::Liveness,
        Property::NonTriviality,
    ];

    /// Eventual properties cannot be decided on a truncated trace.
    pub fn is_eventual(self) -> bool {
        matches!(self, Property::Validity | Property::Totality | Property::Liveness)
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Pass,
    /// `evidence` lists the steps of the witnessing events.
    Fail {
        evidence: Vec<u64>,
        reason: String,
    },
    Inconclusive(String),
}

impl Status {
    pub fn is_pass(&self) -> bool {
        matches!(self, Status::Pass)
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, Status::Fail { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail { .. } => "FAIL",
            Status::Inconclusive(_) => "INCONCLUSIVE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub property: Property,
    pub status: Status,
}

/// Whether every installed view had at most `f` Byzantine members.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub within_bound: bool,
    /// The installed view with the largest Byzantine excess, as (view, Byzantine members, bound).
    pub worst: (View, usize, usize),
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (v, b, bound) = &self.worst;
        let label = if self.within_bound { "within fault bound" } else { "fault bound exceeded" };
        write!(f, "{label}: {b} Byzantine of {} in {v} (bound {bound})", v.size())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub verdicts: Vec<Verdict>,
    pub regime: Regime,
    pub truncated: bool,
}

impl Report {
    pub fn status(&self, p: Property) -> &Status {
        &self.verdicts.iter().find(|v| v.property == p).expect("one verdict per property").status
    }

    pub fn any_fail(&self) -> bool {
        self.verdicts.iter().any(|v| v.status.is_fail())
    }

    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.status.is_pass())
    }

    /// 0 when everything passes, 1 on any failure, 3 when only inconclusive.
    pub fn exit_code(&self) -> i32 {
        if self.any_fail() {
            1
        } else if self.all_pass() {
            0
        } else {
            3
        }
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        for v in &self.verdicts {
            let extra = match &v.status {
                Status::Pass => String::new(),
                Status::Fail { evidence, reason } => format!("  {reason} (steps {evidence:?})"),
                Status::Inconclusive(why) => format!("  {why}"),
            };
            out.push_str(&format!("{:<22} {:<12}{extra}\n", v.property.to_string(), v.status.label()));
        }
        out.push_str(&format!("regime: {}\n", self.regime));
        out
    }
}

#[derive(Default)]
struct Life {
    initial: bool,
    join_invoked: Option<u64>,
    joined: Option<u64>,
    leave_invoked: Option<u64>,
    left: Option<u64>,
    deliveries: Vec<(u64, Digest)>,
    sends: Vec<u64>,
    broadcasts: Vec<(u64, Digest)>,
}

impl Life {
    fn joined_at(&self) -> Option<u64> {
        if self.initial {
            Some(0)
        } else {
            self.joined
        }
    }

    /// A participant at some time at or after `t`.
    fn participant_from(&self, t: u64) -> bool {
        self.joined_at().is_some() && self.leave_invoked.is_none_or(|l| l > t)
    }

    fn participant_at(&self, t: u64) -> bool {
        self.joined_at().is_some_and(|j| j <= t) && self.leave_invoked.is_none_or(|l| l > t)
    }

    fn delivered(&self, m: &Digest) -> bool {
        self.deliveries.iter().any(|(_, d)| d == m)
    }
}

fn fail(evidence: Vec<u64>, reason: impl Into<String>) -> Status {
    Status::Fail { evidence, reason: reason.into() }
}

/// Checks `trace` against `scenario`. Malformed traces are an error.
pub fn check(trace: &Trace, scenario: &Scenario) -> Result<Report, TraceError> {
    trace.validate()?;
    let v0 = &trace.header.initial_view;
    let correct: BTreeSet<ProcessId> =
        trace.header.universe.iter().copied().filter(|p| scenario.is_correct(*p)).collect();
    let mut lives: BTreeMap<ProcessId, Life> =
        correct.iter().map(|&p| (p, Life { initial: v0.is_member(p), ..Life::default() })).collect();
    for e in &trace.events {
        let Some(life) = lives.get_mut(&e.actor) else {
            continue;
        };
        let kind = e.kind.expect("validated");
        match kind {
            EventKind::Send => life.sends.push(e.step),
            EventKind::Invoke if e.detail_is("join") => {
                life.join_invoked.get_or_insert(e.step);
            }
            EventKind::Invoke if e.detail_is("leave") => {
                life.leave_invoked.get_or_insert(e.step);
            }
            EventKind::Invoke if e.detail_is("broadcast") => {
                life.broadcasts.push((e.step, payload(e)?));
            }
            EventKind::Callback if e.detail_is("delivered") => life.deliveries.push((e.step, payload(e)?)),
            EventKind::Callback if e.detail_is("join_complete") => {
                life.joined.get_or_insert(e.step);
            }
            EventKind::Callback if e.detail_is("leave_complete") => {
                life.left.get_or_insert(e.step);
            }
            _ => {}
        }
    }
    let sender = trace.header.sender;
    let truncated = trace.truncated();
    let eventual = |s: Status| {
        if truncated {
            Status::Inconclusive("trace truncated".into())
        } else {
            s
        }
    };

    let verdicts = vec![
        Verdict { property: Property::Validity, status: eventual(validity(&lives, sender)) },
        Verdict { property: Property::Totality, status: eventual(totality(&lives)) },
        Verdict { property: Property::NoDuplication, status: no_duplication(&lives) },
        Verdict { property: Property::Integrity, status: integrity(&lives, sender) },
        Verdict { property: Property::Consistency, status: consistency(&lives) },
        Verdict { property: Property::Liveness, status: eventual(liveness(&lives, sender)) },
        Verdict { property: Property::NonTriviality, status: non_triviality(&lives) },
        Verdict { property: Property::InstalledViewsChain, status: installed_chain(trace, &correct) },
        Verdict { property: Property::ValidViewsComparable, status: valid_comparable(trace, &correct) },
        Verdict { property: Property::ConvergedTotalOrder, status: converged_order(trace, &correct) },
    ];
    let regime = regime(trace, &correct, &scenario.byzantine());
    Ok(Report { verdicts, regime, truncated })
}

fn payload(e: &TraceEvent) -> Result<Digest, TraceError> {
    e.payload_digest.ok_or_else(|| TraceError::Malformed(format!("step {}: missing payload digest", e.step)))
}

fn validity(lives: &BTreeMap<ProcessId, Life>, sender: ProcessId) -> Status {
    let Some(s) = lives.get(&sender) else {
        return Status::Pass;
    };
    for &(t, m) in &s.broadcasts {
        if !s.participant_at(t) {
            continue;
        }
        for (q, life) in lives {
            if life.participant_from(t) && life.left.is_none() && !life.delivered(&m) {
                return fail(vec![t], format!("{q} never delivered the broadcast"));
            }
        }
    }
    Status::Pass
}

fn totality(lives: &BTreeMap<ProcessId, Life>) -> Status {
    for (p, life) in lives {
        for &(t, m) in &life.deliveries {
            for (q, other) in lives {
                if other.participant_from(t) && !other.delivered(&m) {
                    return fail(vec![t], format!("{p} delivered but participant {q} never did"));
                }
            }
        }
    }
    Status::Pass
}

fn no_duplication(lives: &BTreeMap<ProcessId, Life>) -> Status {
    for (p, life) in lives {
        if let [(a, _), (b, _), ..] = life.deliveries[..] {
            return fail(vec![a, b], format!("{p} delivered twice"));
        }
    }
    Status::Pass
}

fn integrity(lives: &BTreeMap<ProcessId, Life>, sender: ProcessId) -> Status {
    let Some(s) = lives.get(&sender) else {
        return Status::Pass;
    };
    for (p, life) in lives {
        for &(t, m) in &life.deliveries {
            if !s.broadcasts.iter().any(|&(tb, mb)| tb < t && mb == m) {
                return fail(vec![t], format!("{p} delivered a payload the sender never broadcast"));
            }
        }
    }
    Status::Pass
}

fn consistency(lives: &BTreeMap<ProcessId, Life>) -> Status {
    let mut first: Option<(u64, Digest)> = None;
    for life in lives.values() {
        for &(t, m) in &life.deliveries {
            match first {
                None => first = Some((t, m)),
                Some((t0, m0)) if m0 != m => {
                    let (a, b) = (t0.min(t), t0.max(t));
                    return fail(vec![a, b], "two different payloads delivered");
                }
                Some(_) => {}
            }
        }
    }
    Status::Pass
}

fn liveness(lives: &BTreeMap<ProcessId, Life>, sender: ProcessId) -> Status {
    for (p, life) in lives {
        if let (Some(t), None) = (life.join_invoked, life.joined) {
            return fail(vec![t], format!("join by {p} never completed"));
        }
        if let (Some(t), None) = (life.leave_invoked, life.left) {
            return fail(vec![t], format!("leave by {p} never completed"));
        }
        if *p == sender {
            if let Some(&(t, m)) = life.broadcasts.first() {
                if !life.delivered(&m) {
                    return fail(vec![t], "broadcast never completed");
                }
            }
        }
    }
    Status::Pass
}

fn non_triviality(lives: &BTreeMap<ProcessId, Life>) -> Status {
    for (p, life) in lives {
        for &s in &life.sends {
            let started = life.initial || life.join_invoked.is_some_and(|j| j < s);
            let ended = life.left.is_some_and(|l| l < s);
            if !started || ended {
                return fail(vec![s], format!("{p} sent outside its participation window"));
            }
        }
    }
    Status::Pass
}

/// First pair of distinct, incomparable views, as (step, view) pairs.
fn incomparable<'a>(views: impl IntoIterator<Item = (u64, &'a View)>) -> Option<(u64, u64)> {
    let mut seen: BTreeMap<&View, u64> = BTreeMap::new();
    for (step, v) in views {
        if seen.contains_key(v) {
            continue;
        }
        if let Some((_, &s)) = seen.iter().find(|(w, _)| !w.comparable(v)) {
            return Some((s, step));
        }
        seen.insert(v, step);
    }
    None
}

fn by_correct<'a>(trace: &'a Trace, correct: &'a BTreeSet<ProcessId>) -> impl Iterator<Item = &'a TraceEvent> {
    trace.events.iter().filter(move |e| correct.contains(&e.actor))
}

fn installed_chain(trace: &Trace, correct: &BTreeSet<ProcessId>) -> Status {
    let views = by_correct(trace, correct)
        .filter(|e| e.is(EventKind::Install))
        .filter_map(|e| e.view.as_ref().map(|v| (e.step, v)));
    match incomparable(views) {
        Some((a, b)) => fail(vec![a, b], "incomparable views installed"),
        None => Status::Pass,
    }
}

fn valid_comparable(trace: &Trace, correct: &BTreeSet<ProcessId>) -> Status {
    let mut views = Vec::new();
    for e in by_correct(trace, correct) {
        if e.is(EventKind::Install) {
            views.extend(e.view.iter().map(|v| (e.step, v)));
        } else if e.is(EventKind::StateNote) && (e.detail_is("install_accepted") || e.detail_is("commit_accepted")) {
            views.extend(e.view.iter().chain(e.aux_view.iter()).map(|v| (e.step, v)));
        }
    }
    match incomparable(views) {
        Some((a, b)) => fail(vec![a, b], "incomparable valid views"),
        None => Status::Pass,
    }
}

fn converged_order(trace: &Trace, correct: &BTreeSet<ProcessId>) -> Status {
    let mut by_view: BTreeMap<&View, Vec<(u64, BTreeSet<&View>)>> = BTreeMap::new();
    for e in by_correct(trace, correct) {
        if !(e.is(EventKind::StateNote) && (e.detail_is("converged") || e.detail_is("install_accepted"))) {
            continue;
        }
        let (Some(replaced), Some(seq)) = (&e.aux_view, &e.seq) else {
            continue;
        };
        let seq: BTreeSet<&View> = seq.iter().collect();
        let seen = by_view.entry(replaced).or_default();
        if let Some((s, _)) = seen.iter().find(|(_, other)| !(other.is_subset(&seq) || seq.is_subset(other))) {
            return fail(vec![*s, e.step], format!("converged sequences for {replaced} are not ordered"));
        }
        seen.push((e.step, seq));
    }
    Status::Pass
}

fn regime(trace: &Trace, correct: &BTreeSet<ProcessId>, byzantine: &BTreeSet<ProcessId>) -> Regime {
    let mut views: BTreeSet<&View> = BTreeSet::new();
    views.insert(&trace.header.initial_view);
    for e in by_correct(trace, correct).filter(|e| e.is(EventKind::Install)) {
        views.extend(e.view.iter());
    }
    let mut worst: Option<(i64, (View, usize, usize))> = None;
    for v in views {
        let b = v.members().intersection(byzantine).count();
        let bound = v.fault_bound();
        let excess = b as i64 - bound as i64;
        if worst.as_ref().is_none_or(|(e, _)| excess > *e) {
            worst = Some((excess, (v.clone(), b, bound)));
        }
    }
    let (excess, worst) = worst.expect("initial view is always present");
    Regime { within_bound: excess <= 0, worst }
}

/// Correct processes whose sends include ACKs for more than one payload.
pub fn multi_ack_processes(trace: &Trace, scenario: &Scenario) -> BTreeSet<ProcessId> {
    let mut acked: BTreeMap<ProcessId, BTreeSet<Digest>> = BTreeMap::new();
    for e in &trace.events {
        if e.is(EventKind::Send) && e.msg_kind == Some(MsgKind::Ack) && scenario.is_correct(e.actor) {
            if let Some(d) = e.payload_digest {
                acked.entry(e.actor).or_default().insert(d);
            }
        }
    }
    acked.into_iter().filter(|(_, s)| s.len() > 1).map(|(p, _)| p).collect()
}
