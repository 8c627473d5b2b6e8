//! Run traces as JSON Lines: a header, one line per event, and a footer.

use std::collections::BTreeSet;
use std::fmt;

use dbrb_core::{Digest, MsgKind, ProcessId, View};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA: &str = "dbrb-trace/1";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("malformed trace: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Send,
    Receive,
    Invoke,
    Callback,
    Install,
    StateNote,
    Drop,
    Flag,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One observable event. Which optional fields are set depends on `kind`:
///
/// - `Send`/`Receive`: `peer`, `msg_id`, `msg_kind`, `signer`, `view_digest`, `payload_digest`.
/// - `Invoke`: `detail` is `join`, `leave` or `broadcast`; broadcasts carry `payload_digest`.
/// - `Callback`: `detail` is `delivered`, `join_complete` or `leave_complete`.
/// - `Install`: `view`.
/// - `StateNote`: `detail` names the transition; `view`, `aux_view` and `seq` as relevant.
/// - `Drop`/`Flag`: `detail` is the reason; `peer` is the signer for flags.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    pub time: u64,
    pub kind: Option<EventKind>,
    pub actor: ProcessId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<ProcessId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_kind: Option<MsgKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signer: Option<ProcessId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_digest: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_digest: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<View>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_view: Option<View>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<Vec<View>>,
}

impl TraceEvent {
    pub fn new(kind: EventKind, actor: ProcessId) -> TraceEvent {
        TraceEvent { kind: Some(kind), actor, ..TraceEvent::default() }
    }

    pub fn is(&self, kind: EventKind) -> bool {
        self.kind == Some(kind)
    }

    pub fn detail_is(&self, d: &str) -> bool {
        self.detail.as_deref() == Some(d)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub scenario: String,
    pub seed: u64,
    pub universe: Vec<ProcessId>,
    pub initial_view: View,
    pub sender: ProcessId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFooter {
    pub truncated: bool,
    /// Number of events in the trace.
    pub events: u64,
    pub deliveries: u64,
    pub messages: u64,
    pub final_time: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header(TraceHeader),
    Event(TraceEvent),
    Footer(TraceFooter),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
    pub footer: TraceFooter,
}

impl Trace {
    pub fn truncated(&self) -> bool {
        self.footer.truncated
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |r: &Record| {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        };
        line(&Record::Header(self.header.clone()));
        for e in &self.events {
            line(&Record::Event(e.clone()));
        }
        line(&Record::Footer(self.footer.clone()));
        out
    }

    /// Parses and validates a trace.
    pub fn from_jsonl(text: &str) -> Result<Trace, TraceError> {
        let mut header = None;
        let mut footer = None;
        let mut events = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let record: Record =
                serde_json::from_str(raw).map_err(|source| TraceError::Json { line: i + 1, source })?;
            if footer.is_some() {
                return Err(TraceError::Malformed(format!("line {}: record after footer", i + 1)));
            }
            match record {
                Record::Header(h) if header.is_none() && events.is_empty() => header = Some(h),
                Record::Header(_) => return Err(TraceError::Malformed(format!("line {}: unexpected header", i + 1))),
                Record::Event(_) if header.is_none() => {
                    return Err(TraceError::Malformed("event before header".into()))
                }
                Record::Event(e) => events.push(e),
                Record::Footer(f) => footer = Some(f),
            }
        }
        let header = header.ok_or_else(|| TraceError::Malformed("missing header".into()))?;
        let footer = footer.ok_or_else(|| TraceError::Malformed("missing footer".into()))?;
        let trace = Trace { header, events, footer };
        trace.validate()?;
        Ok(trace)
    }

    /// Structural well-formedness: schema, strictly increasing steps, known
    /// actors, and every Receive paired with exactly one earlier Send.
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::Malformed(m));
        if self.header.schema != SCHEMA {
            return bad(format!("unsupported schema {:?}", self.header.schema));
        }
        let universe: BTreeSet<ProcessId> = self.header.universe.iter().copied().collect();
        let mut sent: std::collections::BTreeMap<u64, (ProcessId, ProcessId)> = Default::default();
        let mut received = BTreeSet::new();
        let mut last: Option<u64> = None;
        for e in &self.events {
            let Some(kind) = e.kind else {
                return bad(format!("step {}: missing kind", e.step));
            };
            if last.is_some_and(|l| e.step <= l) {
                return bad(format!("step {} does not increase", e.step));
            }
            last = Some(e.step);
            if !universe.contains(&e.actor) {
                return bad(format!("step {}: unknown actor {}", e.step, e.actor));
            }
            match kind {
                EventKind::Send => {
                    let (Some(id), Some(to)) = (e.msg_id, e.peer) else {
                        return bad(format!("step {}: send without id or destination", e.step));
                    };
                    if sent.insert(id, (e.actor, to)).is_some() {
                        return bad(format!("step {}: message id {id} sent twice", e.step));
                    }
                }
                EventKind::Receive => {
                    let Some(id) = e.msg_id else {
                        return bad(format!("step {}: receive without id", e.step));
                    };
                    match sent.get(&id) {
                        Some(&(from, to)) if to == e.actor && Some(from) == e.peer => {}
                        _ => return bad(format!("step {}: receive of unsent message {id}", e.step)),
                    }
                    if !received.insert(id) {
                        return bad(format!("step {}: message {id} received twice", e.step));
                    }
                }
                _ => {}
            }
        }
        if self.footer.events != self.events.len() as u64 {
            return bad("footer event count does not match".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trace {
        let v0 = View::initial([ProcessId(1), ProcessId(2)]);
        let mut send = TraceEvent::new(EventKind::Send, ProcessId(1));
        send.step = 0;
        send.peer = Some(ProcessId(2));
        send.msg_id = Some(0);
        send.msg_kind = Some(MsgKind::Prepare);
        let mut recv = TraceEvent::new(EventKind::Receive, ProcessId(2));
        recv.step = 1;
        recv.time = 3;
        recv.peer = Some(ProcessId(1));
        recv.msg_id = Some(0);
        let mut inst = TraceEvent::new(EventKind::Install, ProcessId(2));
        inst.step = 2;
        inst.view = Some(v0.clone());
        Trace {
            header: TraceHeader {
                schema: SCHEMA.into(),
                scenario: "t".into(),
                seed: 7,
                universe: vec![ProcessId(1), ProcessId(2)],
                initial_view: v0,
                sender: ProcessId(1),
            },
            events: vec![send, recv, inst],
            footer: TraceFooter { events: 3, ..TraceFooter::default() },
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let t = sample();
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().next().unwrap().contains("\"record\":\"header\""));
        assert_eq!(Trace::from_jsonl(&text).unwrap(), t);
    }

    #[test]
    fn rejects_malformed() {
        let mut t = sample();
        t.events[1].step = 0;
        assert!(t.validate().is_err());

        let mut t = sample();
        t.events[1].msg_id = Some(9);
        assert!(t.validate().is_err());

        let mut t = sample();
        t.events.push(t.events[1].clone());
        t.events[3].step = 3;
        t.footer.events = 4;
        assert!(t.validate().is_err());

        let text = sample().to_jsonl();
        let no_footer: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(Trace::from_jsonl(&no_footer).is_err());
        assert!(Trace::from_jsonl("{\"record\":\"event\"}").is_err());
    }
}
