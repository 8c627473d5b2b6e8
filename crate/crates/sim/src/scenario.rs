//! Scenario files: who exists, who misbehaves, what gets invoked when, and how
//! the network delays messages.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use dbrb_core::{MsgKind, ProcessId, SignatureScheme, View};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Never sends anything.
    Silent,
    /// As sender: different payloads to two halves of the view. Otherwise: an
    /// accomplice that acknowledges every PREPARE and confirms every COMMIT.
    EquivocateSender,
    /// Answers PREPAREs with COMMITs carrying forged or sub-quorum certificates.
    ForgeCertificate,
    /// Behaves correctly but re-sends old messages whenever a newer view shows up.
    ReplayStaleView,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Correct,
    Byzantine(Strategy),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallbackKind {
    Delivered,
    JoinComplete,
    LeaveComplete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// At the given logical time.
    AtTime(u64),
    /// When `callback` first fires at `process` (any process if omitted),
    /// plus `delay` time units.
    After {
        callback: CallbackKind,
        #[serde(default)]
        process: Option<ProcessId>,
        #[serde(default)]
        delay: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Join,
    Leave,
    Broadcast(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub process: ProcessId,
    pub action: Action,
    pub trigger: Trigger,
}

/// Extra delay for messages matching every given filter.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayRule {
    #[serde(default)]
    pub from: Option<ProcessId>,
    #[serde(default)]
    pub to: Option<ProcessId>,
    /// Empty matches every kind.
    #[serde(default)]
    pub kinds: Vec<MsgKind>,
    pub extra_delay: u64,
}

impl DelayRule {
    pub fn matches(&self, from: ProcessId, to: ProcessId, kind: MsgKind) -> bool {
        self.from.is_none_or(|f| f == from)
            && self.to.is_none_or(|t| t == to)
            && (self.kinds.is_empty() || self.kinds.contains(&kind))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Network {
    /// Base delays are drawn uniformly from `1..=max_delay_steps`.
    #[serde(default = "default_max_delay")]
    pub max_delay_steps: u64,
    /// Without reordering every message takes exactly one time unit.
    #[serde(default = "default_true")]
    pub reorder: bool,
    #[serde(default)]
    pub rules: Vec<DelayRule>,
}

impl Default for Network {
    fn default() -> Network {
        Network { max_delay_steps: default_max_delay(), reorder: true, rules: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    /// Maximum number of message deliveries.
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    /// Maximum number of messages sent.
    #[serde(default = "default_max_messages")]
    pub max_messages: u64,
}

impl Default for Limits {
    fn default() -> Limits {
        Limits { max_steps: default_max_steps(), max_messages: default_max_messages() }
    }
}

fn default_max_delay() -> u64 {
    8
}
fn default_true() -> bool {
    true
}
fn default_max_steps() -> u64 {
    2_000_000
}
fn default_max_messages() -> u64 {
    4_000_000
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub universe: Vec<ProcessId>,
    pub initial_members: Vec<ProcessId>,
    pub sender: ProcessId,
    #[serde(default)]
    pub roles: BTreeMap<ProcessId, Role>,
    #[serde(default)]
    pub script: Vec<ScriptEntry>,
    #[serde(default)]
    pub network: Network,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub signature_scheme: SignatureScheme,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Scenario::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let universe: BTreeSet<ProcessId> = self.universe.iter().copied().collect();
        if universe.len() != self.universe.len() {
            return bad("universe lists a process twice".into());
        }
        if self.initial_members.is_empty() {
            return bad("initial view is empty".into());
        }
        for p in &self.initial_members {
            if !universe.contains(p) {
                return bad(format!("initial member {p} is not in the universe"));
            }
        }
        if !self.initial_members.contains(&self.sender) {
            return bad(format!("sender {} is not an initial member", self.sender));
        }
        for p in self.roles.keys() {
            if !universe.contains(p) {
                return bad(format!("role assigned to unknown process {p}"));
            }
        }
        for e in &self.script {
            if !universe.contains(&e.process) {
                return bad(format!("script refers to unknown process {}", e.process));
            }
            if let Trigger::After { process: Some(p), .. } = &e.trigger {
                if !universe.contains(p) {
                    return bad(format!("trigger refers to unknown process {p}"));
                }
            }
            if matches!(e.action, Action::Broadcast(_)) && e.process != self.sender {
                return bad(format!("broadcast scripted at {}, sender is {}", e.process, self.sender));
            }
        }
        if self.network.max_delay_steps == 0 {
            return bad("max_delay_steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn initial_view(&self) -> View {
        View::initial(self.initial_members.iter().copied())
    }

    pub fn role(&self, p: ProcessId) -> &Role {
        static CORRECT: Role = Role::Correct;
        self.roles.get(&p).unwrap_or(&CORRECT)
    }

    pub fn is_correct(&self, p: ProcessId) -> bool {
        matches!(self.role(p), Role::Correct)
    }

    pub fn byzantine(&self) -> BTreeSet<ProcessId> {
        self.universe.iter().copied().filter(|p| !self.is_correct(*p)).collect()
    }
}
