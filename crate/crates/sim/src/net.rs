//! The discrete-event simulator.
//!
//! Messages are delivered after a delay drawn from a seeded generator, so the
//! interleaving is a function of `(scenario, seed)` alone. Links never drop
//! messages. A run ends when nothing is in flight or a limit is hit.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use dbrb_core::{
    Callback, InputEvent, Invocation, Keyring, Node, NodeConfig, Note, OutputAction, Payload, ProcessId, SignedMessage,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{Adversary, Context};
use crate::scenario::{Action, CallbackKind, Limits, Role, Scenario, Trigger};
use crate::trace::{EventKind, Trace, TraceEvent, TraceFooter, TraceHeader, SCHEMA};

enum Process {
    Correct(Box<Node>),
    Byzantine(Box<Adversary>),
}

enum Pending {
    Message { id: u64, from: ProcessId, to: ProcessId, message: SignedMessage },
    Script(usize),
}

struct Sim<'a> {
    scenario: &'a Scenario,
    limits: Limits,
    rng: ChaCha8Rng,
    procs: BTreeMap<ProcessId, Process>,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    pending: BTreeMap<u64, Pending>,
    seqno: u64,
    now: u64,
    next_msg: u64,
    deliveries: u64,
    events: Vec<TraceEvent>,
    /// Script entries waiting on a callback.
    waiting: Vec<usize>,
    truncated: bool,
}

/// Runs `scenario` with its own limits.
pub fn run(scenario: &Scenario, seed: u64) -> Trace {
    run_with_limits(scenario, seed, scenario.limits.clone())
}

pub fn run_with_limits(scenario: &Scenario, seed: u64, limits: Limits) -> Trace {
    let mut sim = Sim::new(scenario, seed, limits);
    sim.start();
    sim.run();
    sim.finish(seed)
}

impl<'a> Sim<'a> {
    fn new(scenario: &'a Scenario, seed: u64, limits: Limits) -> Sim<'a> {
        let v0 = scenario.initial_view();
        let (keyring, mut keys) = Keyring::generate(scenario.signature_scheme, scenario.universe.iter().copied(), seed);
        let ctx = Context {
            universe: scenario.universe.clone(),
            initial_view: v0.clone(),
            sender: scenario.sender,
            byzantine: scenario.byzantine(),
        };
        let mut procs = BTreeMap::new();
        for &p in &scenario.universe {
            let key = keys.remove(&p).expect("key for every process");
            let proc = match scenario.role(p) {
                Role::Correct => {
                    let cfg = NodeConfig { id: p, initial_view: v0.clone(), sender: scenario.sender };
                    Process::Correct(Box::new(Node::new(cfg, key, keyring.clone())))
                }
                Role::Byzantine(strategy) => {
                    Process::Byzantine(Box::new(Adversary::new(strategy, key, keyring.clone(), ctx.clone())))
                }
            };
            procs.insert(p, proc);
        }
        Sim {
            scenario,
            limits,
            rng: ChaCha8Rng::seed_from_u64(seed),
            procs,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            seqno: 0,
            now: 0,
            next_msg: 0,
            deliveries: 0,
            events: Vec::new(),
            waiting: Vec::new(),
            truncated: false,
        }
    }

    fn start(&mut self) {
        let v0 = self.scenario.initial_view();
        let installed: Vec<ProcessId> = self
            .procs
            .iter()
            .filter(|(p, proc)| matches!(proc, Process::Correct(_)) && v0.is_member(**p))
            .map(|(p, _)| *p)
            .collect();
        for p in installed {
            let mut e = TraceEvent::new(EventKind::Install, p);
            e.view = Some(v0.clone());
            self.push(e);
        }
        for (i, entry) in self.scenario.script.iter().enumerate() {
            match entry.trigger {
                Trigger::AtTime(t) => self.schedule(t, Pending::Script(i)),
                Trigger::After { .. } => self.waiting.push(i),
            }
        }
    }

    fn schedule(&mut self, at: u64, item: Pending) {
        let s = self.seqno;
        self.seqno += 1;
        self.queue.push(Reverse((at, s)));
        self.pending.insert(s, item);
    }

    fn run(&mut self) {
        while let Some(Reverse((at, s))) = self.queue.pop() {
            self.now = at;
            match self.pending.remove(&s).expect("queued item exists") {
                Pending::Script(i) => self.invoke(i),
                Pending::Message { id, from, to, message } => {
                    if self.deliveries >= self.limits.max_steps {
                        self.truncated = true;
                        return;
                    }
                    self.deliveries += 1;
                    self.deliver(id, from, to, message);
                }
            }
            if self.truncated {
                return;
            }
        }
    }

    fn invoke(&mut self, i: usize) {
        let entry = &self.scenario.script[i];
        let p = entry.process;
        let (inv, detail, payload) = match &entry.action {
            Action::Join => (Invocation::Join, "join", None),
            Action::Leave => (Invocation::Leave, "leave", None),
            Action::Broadcast(m) => {
                let m = Payload::from(m.as_str());
                (Invocation::Broadcast(m.clone()), "broadcast", Some(m.digest()))
            }
        };
        let result = match self.procs.get_mut(&p).expect("scripted process exists") {
            Process::Correct(node) => node.step(InputEvent::Invoke(inv)).map_err(|e| e.to_string()),
            Process::Byzantine(adv) => Ok(adv.step(InputEvent::Invoke(inv))),
        };
        match result {
            Ok(actions) => {
                let mut e = TraceEvent::new(EventKind::Invoke, p);
                e.detail = Some(detail.into());
                e.payload_digest = payload;
                self.push(e);
                self.apply(p, actions);
            }
            Err(reason) => {
                let mut e = TraceEvent::new(EventKind::Drop, p);
                e.detail = Some(format!("{detail} invocation rejected: {reason}"));
                self.push(e);
            }
        }
    }

    fn deliver(&mut self, id: u64, from: ProcessId, to: ProcessId, message: SignedMessage) {
        self.push(message_event(EventKind::Receive, to, from, id, &message));
        let event = InputEvent::Receive { from, message };
        let actions = match self.procs.get_mut(&to).expect("destination exists") {
            Process::Correct(node) => match node.step(event) {
                Ok(actions) => actions,
                Err(err) => {
                    let mut e = TraceEvent::new(EventKind::Drop, to);
                    e.detail = Some(err.to_string());
                    self.push(e);
                    return;
                }
            },
            Process::Byzantine(adv) => adv.step(event),
        };
        self.apply(to, actions);
    }

    fn push(&mut self, mut e: TraceEvent) {
        e.step = self.events.len() as u64;
        e.time = self.now;
        self.events.push(e);
    }

    fn apply(&mut self, p: ProcessId, actions: Vec<OutputAction>) {
        for action in actions {
            match action {
                OutputAction::Send { to, message } => self.transmit(p, to, message),
                OutputAction::Flood(message) => {
                    let targets: Vec<ProcessId> = self.scenario.universe.iter().copied().filter(|&q| q != p).collect();
                    for to in targets {
                        self.transmit(p, to, message.clone());
                    }
                }
                OutputAction::Callback(c) => self.callback(p, c),
                OutputAction::Note(n) => self.push(note_event(p, n)),
                OutputAction::Halt => {
                    let mut e = TraceEvent::new(EventKind::StateNote, p);
                    e.detail = Some("halt".into());
                    self.push(e);
                }
            }
        }
    }

    fn transmit(&mut self, from: ProcessId, to: ProcessId, message: SignedMessage) {
        if self.truncated {
            return;
        }
        if self.next_msg >= self.limits.max_messages {
            self.truncated = true;
            return;
        }
        let id = self.next_msg;
        self.next_msg += 1;
        self.push(message_event(EventKind::Send, from, to, id, &message));
        let net = &self.scenario.network;
        let mut delay = if net.reorder { self.rng.gen_range(1..=net.max_delay_steps) } else { 1 };
        let kind = message.kind();
        delay += net.rules.iter().filter(|r| r.matches(from, to, kind)).map(|r| r.extra_delay).sum::<u64>();
        self.schedule(self.now + delay, Pending::Message { id, from, to, message });
    }

    fn callback(&mut self, p: ProcessId, c: Callback) {
        let mut e = TraceEvent::new(EventKind::Callback, p);
        let kind = match &c {
            Callback::Delivered(m) => {
                e.payload_digest = Some(m.digest());
                CallbackKind::Delivered
            }
            Callback::JoinComplete => CallbackKind::JoinComplete,
            Callback::LeaveComplete => CallbackKind::LeaveComplete,
        };
        e.detail = Some(callback_name(kind).into());
        self.push(e);
        if !self.scenario.is_correct(p) {
            return;
        }
        let fired: Vec<(usize, u64)> = self
            .waiting
            .iter()
            .filter_map(|&i| match self.scenario.script[i].trigger {
                Trigger::After { callback, process, delay } if callback == kind && process.is_none_or(|q| q == p) => {
                    Some((i, delay))
                }
                _ => None,
            })
            .collect();
        for (i, delay) in fired {
            self.waiting.retain(|&w| w != i);
            self.schedule(self.now + delay, Pending::Script(i));
        }
    }

    fn finish(self, seed: u64) -> Trace {
        let header = TraceHeader {
            schema: SCHEMA.into(),
            scenario: self.scenario.name.clone(),
            seed,
            universe: self.scenario.universe.clone(),
            initial_view: self.scenario.initial_view(),
            sender: self.scenario.sender,
        };
        let footer = TraceFooter {
            truncated: self.truncated,
            events: self.events.len() as u64,
            deliveries: self.deliveries,
            messages: self.next_msg,
            final_time: self.now,
        };
        Trace { header, events: self.events, footer }
    }
}

pub fn callback_name(kind: CallbackKind) -> &'static str {
    match kind {
        CallbackKind::Delivered => "delivered",
        CallbackKind::JoinComplete => "join_complete",
        CallbackKind::LeaveComplete => "leave_complete",
    }
}

fn message_event(kind: EventKind, actor: ProcessId, peer: ProcessId, id: u64, m: &SignedMessage) -> TraceEvent {
    let mut e = TraceEvent::new(kind, actor);
    e.peer = Some(peer);
    e.msg_id = Some(id);
    e.msg_kind = Some(m.kind());
    e.signer = Some(m.signer);
    e.view_digest = m.body.view().map(|v| v.digest());
    e.payload_digest = m.body.payload().map(|p| p.digest());
    e
}

fn note_event(p: ProcessId, n: Note) -> TraceEvent {
    let state = |detail: &str| {
        let mut e = TraceEvent::new(EventKind::StateNote, p);
        e.detail = Some(detail.into());
        e
    };
    match n {
        Note::Installed { view } => {
            let mut e = TraceEvent::new(EventKind::Install, p);
            e.view = Some(view);
            e
        }
        Note::ViewAdopted { view } => TraceEvent { view: Some(view), ..state("view_adopted") },
        Note::Suspended { view } => TraceEvent { view: Some(view), ..state("suspended") },
        Note::InstallAccepted { omega, seq, replaced } => TraceEvent {
            view: Some(omega),
            aux_view: Some(replaced),
            seq: Some(seq.iter().cloned().collect()),
            ..state("install_accepted")
        },
        Note::ConvergedOn { replaced, seq } => {
            TraceEvent { aux_view: Some(replaced), seq: Some(seq.iter().cloned().collect()), ..state("converged") }
        }
        Note::Proposed { view, seq } => {
            TraceEvent { view: Some(view), seq: Some(seq.iter().cloned().collect()), ..state("proposed") }
        }
        Note::CertificateCollected { payload, v_cer } => {
            TraceEvent { payload_digest: Some(payload), aux_view: Some(v_cer), ..state("certificate") }
        }
        Note::CommitAccepted { payload, v_cer, view } => TraceEvent {
            payload_digest: Some(payload),
            view: Some(view),
            aux_view: Some(v_cer),
            ..state("commit_accepted")
        },
        Note::Stored { payload, v_cer } => {
            TraceEvent { payload_digest: Some(payload), aux_view: Some(v_cer), ..state("stored") }
        }
        Note::AllowedAck { allowed } => state(&format!("allowed_ack:{allowed}")),
        Note::Trusted { view } => TraceEvent { view: Some(view), ..state("trusted") },
        Note::Rejected { kind, view, reason } => {
            let mut e = TraceEvent::new(EventKind::Drop, p);
            e.msg_kind = Some(kind);
            e.view_digest = view.as_ref().map(|v| v.digest());
            e.view = view;
            e.detail = Some(reason.into());
            e
        }
        Note::Flagged { kind, signer, reason } => {
            let mut e = TraceEvent::new(EventKind::Flag, p);
            e.msg_kind = kind;
            e.peer = signer;
            e.detail = Some(reason.into());
            e
        }
    }
}

/// Distinct processes in the trace that fired `Delivered`.
pub fn delivered_processes(trace: &Trace) -> BTreeSet<ProcessId> {
    trace.events.iter().filter(|e| e.is(EventKind::Callback) && e.detail_is("delivered")).map(|e| e.actor).collect()
}
