//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest harness
//! so the lines always reach standard output; exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dbrb_core::{
    ack_payload, digest, verify_certificate, Change, Digest, Keyring, MessageCertificate, MsgKind, Payload, ProcessId,
    SignatureScheme, View,
};
use dbrb_sim::scenario::Action;
use dbrb_sim::{check, multi_ack_processes, run, EventKind, Property, Scenario, Trace};

const GOLDEN_SEEDS: u64 = 20;
const GOLDEN_BUDGET: Duration = Duration::from_secs(1);
const STATIC_SEEDS: u64 = 100;
const STATIC_BUDGET: Duration = Duration::from_secs(10);
const EQUIVOCATION_SEEDS: u64 = 200;
const EQUIVOCATION_BUDGET: Duration = Duration::from_secs(60);
const CHURN_SEEDS: u64 = 100;
const LEAVER_SEEDS: u64 = 100;

fn scenario(name: &str) -> Scenario {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", &format!("{name}.json")].iter().collect();
    Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every trace produced for criteria 1 to 5, for the cross-cutting criteria.
struct Corpus {
    runs: Vec<(String, u64, Digest, Trace)>,
    scenarios: BTreeMap<String, Scenario>,
}

impl Corpus {
    fn run(&mut self, s: &Scenario, seed: u64) -> &Trace {
        let trace = run(s, seed);
        let d = digest(trace.to_jsonl().as_bytes());
        self.scenarios.entry(s.name.clone()).or_insert_with(|| s.clone());
        self.runs.push((s.name.clone(), seed, d, trace));
        &self.runs.last().expect("just pushed").3
    }
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, budget: Duration) -> Result<Duration, String> {
    let took = started.elapsed();
    ensure(took < budget, || format!("took {took:?}, budget {budget:?}"))?;
    Ok(took)
}

fn failing(trace: &Trace, s: &Scenario, props: &[Property]) -> Option<String> {
    let report = check(trace, s).expect("simulator traces are well formed");
    props.iter().find(|p| !report.status(**p).is_pass()).map(|p| format!("{p}: {}", report.status(*p).label()))
}

fn golden(c: &mut Corpus) -> Outcome {
    let s = scenario("join-during-broadcast");
    let v0 = s.initial_view();
    let v1 = v0.with([Change::join(ProcessId(5))]);
    let m = Payload(b"m".to_vec()).digest();
    let mut slowest = Duration::ZERO;
    for seed in 0..GOLDEN_SEEDS {
        let started = Instant::now();
        let t = c.run(&s, seed);
        slowest = slowest.max(within(started, GOLDEN_BUDGET)?);
        let at = |seed| format!("seed {seed}");
        let certificate = t
            .events
            .iter()
            .any(|e| e.actor == ProcessId(1) && e.detail_is("certificate") && e.aux_view.as_ref() == Some(&v0));
        ensure(certificate, || format!("{}: no certificate with v_cer = v0 at p1", at(seed)))?;
        for p in [2, 3, 4] {
            ensure(
                t.events.iter().any(|e| {
                    e.actor == ProcessId(p)
                        && e.is(EventKind::Drop)
                        && e.msg_kind == Some(MsgKind::Commit)
                        && e.view.as_ref() == Some(&v0)
                }),
                || format!("{}: p{p} never rejected a COMMIT tagged v0", at(seed)),
            )?;
        }
        let p1_installs_v1 = t
            .events
            .iter()
            .position(|e| e.actor == ProcessId(1) && e.is(EventKind::Install) && e.view.as_ref() == Some(&v1))
            .ok_or_else(|| format!("{}: p1 never installed v1", at(seed)))?;
        ensure(
            t.events[p1_installs_v1..].iter().any(|e| {
                e.is(EventKind::StateNote)
                    && e.detail_is("commit_accepted")
                    && e.view.as_ref() == Some(&v1)
                    && e.aux_view.as_ref() == Some(&v0)
            }),
            || format!("{}: no COMMIT(m, cer, v0, v1) accepted after p1 installed v1", at(seed)),
        )?;
        let mut delivered: BTreeMap<ProcessId, usize> = BTreeMap::new();
        for e in t.events.iter().filter(|e| e.is(EventKind::Callback) && e.detail_is("delivered")) {
            ensure(e.payload_digest == Some(m), || format!("{}: {} delivered another payload", at(seed), e.actor))?;
            *delivered.entry(e.actor).or_default() += 1;
        }
        ensure(delivered.len() == 5 && delivered.values().all(|&k| k == 1), || {
            format!("{}: deliveries {delivered:?}", at(seed))
        })?;
    }
    Ok(format!("{GOLDEN_SEEDS} seeds, slowest run {slowest:?}"))
}

fn static_regime(c: &mut Corpus) -> Outcome {
    let s = scenario("static-4");
    let started = Instant::now();
    for seed in 0..STATIC_SEEDS {
        let t = c.run(&s, seed);
        ensure(
            !t.events.iter().any(|e| e.is(EventKind::Install) && e.view.as_ref() != Some(&s.initial_view())),
            || format!("seed {seed}: a view other than v0 was installed"),
        )?;
        if let Some(f) = failing(t, &s, &Property::BROADCAST) {
            return Err(format!("seed {seed}: {f}"));
        }
    }
    let took = within(started, STATIC_BUDGET)?;
    Ok(format!("{STATIC_SEEDS} seeds, seven properties, {took:?}"))
}

fn equivocation(c: &mut Corpus) -> Outcome {
    let started = Instant::now();
    let props = [Property::Consistency, Property::NoDuplication, Property::Integrity];
    for name in ["equivocating-sender", "equivocating-sender-7"] {
        let s = scenario(name);
        for seed in 0..EQUIVOCATION_SEEDS {
            let t = c.run(&s, seed);
            if let Some(f) = failing(t, &s, &props) {
                return Err(format!("{name} seed {seed}: {f}"));
            }
            let multi = multi_ack_processes(t, &s);
            ensure(multi.is_empty(), || format!("{name} seed {seed}: {multi:?} acknowledged two payloads"))?;
        }
    }
    let took = within(started, EQUIVOCATION_BUDGET)?;
    Ok(format!("n=4 and n=7, {EQUIVOCATION_SEEDS} seeds each, {took:?}"))
}

fn churn(c: &mut Corpus) -> Outcome {
    let s = scenario("churn-burst");
    let joins = s.script.iter().filter(|e| matches!(e.action, Action::Join)).count();
    let leaves = s.script.iter().filter(|e| matches!(e.action, Action::Leave)).count();
    ensure(joins == 3 && leaves == 2, || format!("churn script has {joins} joins and {leaves} leaves"))?;
    for seed in 0..CHURN_SEEDS {
        let t = c.run(&s, seed);
        ensure(!t.truncated(), || format!("seed {seed}: truncated"))?;
        for (invoke, done) in [("join", "join_complete"), ("leave", "leave_complete")] {
            for e in t.events.iter().filter(|e| e.is(EventKind::Invoke) && e.detail_is(invoke)) {
                let completed = t.events[e.step as usize..]
                    .iter()
                    .any(|d| d.actor == e.actor && d.is(EventKind::Callback) && d.detail_is(done));
                ensure(completed, || format!("seed {seed}: {} never fired {done}", e.actor))?;
            }
        }
        if let Some(f) = failing(t, &s, &[Property::Liveness]) {
            return Err(format!("seed {seed}: {f}"));
        }
    }
    Ok(format!("{CHURN_SEEDS} seeds, 3 joins and 2 leaves completed"))
}

fn leaver_totality(c: &mut Corpus) -> Outcome {
    let s = scenario("leave-after-deliver");
    let leaver = s
        .script
        .iter()
        .find(|e| matches!(e.action, Action::Leave))
        .map(|e| e.process)
        .ok_or("scenario scripts no leave")?;
    for seed in 0..LEAVER_SEEDS {
        let t = c.run(&s, seed);
        let first = |detail: &str| {
            t.events.iter().position(|e| e.actor == leaver && e.is(EventKind::Callback) && e.detail_is(detail))
        };
        let first_delivery = t.events.iter().position(|e| e.is(EventKind::Callback) && e.detail_is("delivered"));
        let leave = t.events.iter().position(|e| e.actor == leaver && e.is(EventKind::Invoke) && e.detail_is("leave"));
        match (first_delivery, leave, first("delivered"), first("leave_complete")) {
            (Some(a), Some(b), Some(d), Some(l)) if a < b && d < l => {}
            other => return Err(format!("seed {seed}: (first delivery, leave, delivered, left) = {other:?}")),
        }
        if let Some(f) = failing(t, &s, &[Property::Totality]) {
            return Err(format!("seed {seed}: {f}"));
        }
    }
    Ok(format!("{LEAVER_SEEDS} seeds, {leaver} delivered before leaving"))
}

fn structural(c: &Corpus) -> Outcome {
    let props = [Property::InstalledViewsChain, Property::ValidViewsComparable, Property::ConvergedTotalOrder];
    for (name, seed, _, t) in &c.runs {
        if let Some(f) = failing(t, &c.scenarios[name], &props) {
            return Err(format!("{name} seed {seed}: {f}"));
        }
    }
    Ok(format!("{} traces", c.runs.len()))
}

/// Exhaustive over signer subsets of a view of `n` plus one outsider.
fn certificates() -> Outcome {
    let mut checked = 0;
    for n in [1u32, 4, 7] {
        let outsider = ProcessId(n + 1);
        let (ring, keys) = Keyring::generate(SignatureScheme::Ed25519, (1..=n + 1).map(ProcessId), 11);
        let v = View::initial((1..=n).map(ProcessId));
        let other_view = View::initial((1..=n + 1).map(ProcessId));
        // Smallest signer count that leaves at most floor((n - 1) / 3) members unheard.
        let threshold = (1..=n).find(|k| 3 * (n - k) < n).expect("k = n qualifies") as usize;
        for mask in 0u32..(1 << (n + 1)) {
            let signers: BTreeSet<ProcessId> =
                (1..=n + 1).filter(|i| mask & (1 << (i - 1)) != 0).map(ProcessId).collect();
            let build = |message: &[u8], over: &[u8], view: &View| {
                let sigs = signers.iter().map(|p| keys[p].sign(&ack_payload(over, view)));
                MessageCertificate::assemble(message, v.clone(), sigs)
            };
            let expected = !signers.contains(&outsider) && signers.len() >= threshold;
            let genuine = build(b"m", b"m", &v);
            ensure(verify_certificate(&ring, &genuine, &v, b"m") == expected, || {
                format!("n={n} signers {signers:?}: expected accept={expected}")
            })?;
            let wrong_payload = build(b"m", b"m'", &v);
            ensure(!verify_certificate(&ring, &wrong_payload, &v, b"m"), || {
                format!("n={n} signers {signers:?}: accepted signatures over another payload")
            })?;
            ensure(!verify_certificate(&ring, &genuine, &v, b"m'"), || {
                format!("n={n} signers {signers:?}: accepted for another payload")
            })?;
            let wrong_view = build(b"m", b"m", &other_view);
            ensure(!verify_certificate(&ring, &wrong_view, &v, b"m"), || {
                format!("n={n} signers {signers:?}: accepted signatures over another view")
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} signer subsets, sub-quorum, wrong payload and non-member signer rejected"))
}

fn determinism(c: &Corpus) -> Outcome {
    for (name, seed, d, _) in &c.runs {
        let again = run(&c.scenarios[name], *seed);
        ensure(digest(again.to_jsonl().as_bytes()) == *d, || format!("{name} seed {seed}: trace differs on rerun"))?;
    }
    Ok(format!("{} reruns byte-identical", c.runs.len()))
}

/// Counts sends by correct processes outside their participation window,
/// independently of the checker, and also requires the checker's verdict.
fn non_triviality(c: &Corpus) -> Outcome {
    for (name, seed, _, t) in &c.runs {
        let s = &c.scenarios[name];
        let mut opened: BTreeMap<ProcessId, u64> = s.initial_members.iter().map(|&p| (p, 0)).collect();
        let mut closed: BTreeMap<ProcessId, u64> = BTreeMap::new();
        for e in &t.events {
            if e.is(EventKind::Invoke) && e.detail_is("join") {
                opened.entry(e.actor).or_insert(e.step);
            }
            if e.is(EventKind::Callback) && e.detail_is("leave_complete") {
                closed.entry(e.actor).or_insert(e.step);
            }
        }
        let outside = t.events.iter().filter(|e| {
            e.is(EventKind::Send)
                && s.is_correct(e.actor)
                && (opened.get(&e.actor).is_none_or(|&o| e.step < o)
                    || closed.get(&e.actor).is_some_and(|&l| e.step > l))
        });
        if let Some(e) = outside.clone().next() {
            return Err(format!("{name} seed {seed}: {} sent at step {} outside its window", e.actor, e.step));
        }
        if let Some(f) = failing(t, s, &[Property::NonTriviality]) {
            return Err(format!("{name} seed {seed}: {f}"));
        }
    }
    Ok(format!("{} traces, no send outside a participation window", c.runs.len()))
}

fn main() -> ExitCode {
    let mut corpus = Corpus { runs: Vec::new(), scenarios: BTreeMap::new() };
    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "golden join during broadcast", golden(&mut corpus)),
        (2, "static regime", static_regime(&mut corpus)),
        (3, "consistency under equivocation", equivocation(&mut corpus)),
        (4, "join/leave liveness", churn(&mut corpus)),
        (5, "totality with leavers", leaver_totality(&mut corpus)),
        (6, "structural invariants", structural(&corpus)),
        (7, "certificate oracle", certificates()),
        (8, "determinism", determinism(&corpus)),
        (9, "non-triviality", non_triviality(&corpus)),
    ];
    let mut failed = false;
    for (n, what, outcome) in results {
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({what}): {detail}"),
            Err(detail) => {
                failed = true;
                println!("FAIL criterion {n} ({what}): {detail}");
            }
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
