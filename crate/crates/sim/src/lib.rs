//! Deterministic simulation of DBRB networks, Byzantine strategies, and a
//! checker that decides the broadcast properties over the resulting traces.
//!
//! ```
//! use dbrb_sim::{check, run, Scenario};
//!
//! let scenario = Scenario::from_json(
//!     r#"{"name": "demo", "universe": [1, 2, 3, 4], "initial_members": [1, 2, 3, 4], "sender": 1,
//!         "script": [{"process": 1, "action": {"broadcast": "m"}, "trigger": {"at_time": 0}}]}"#,
//! )
//! .unwrap();
//! let trace = run(&scenario, 7);
//! assert!(check(&trace, &scenario).unwrap().all_pass());
//! ```

pub mod adversary;
pub mod checker;
pub mod net;
pub mod scenario;
pub mod trace;

pub use checker::{check, multi_ack_processes, Property, Regime, Report, Status, Verdict};
pub use net::{delivered_processes, run, run_with_limits};
pub use scenario::{Scenario, ScenarioError};
pub use trace::{EventKind, Trace, TraceError, TraceEvent};
