use std::collections::{BTreeMap, BTreeSet};

use dbrb_core::{
    ack_payload, quorum_size, verify_certificate, Body, Change, InputEvent, Invocation, Keyring, MessageCertificate,
    Node, NodeConfig, OutputAction, Payload, ProcessId, Sign, Signature, SignatureScheme, SignedMessage, View,
    ViewOrdering, ViewSequence,
};
use proptest::prelude::*;

fn change() -> impl Strategy<Value = Change> {
    (1u32..12, any::<bool>())
        .prop_map(|(p, plus)| Change { process: ProcessId(p), sign: if plus { Sign::Plus } else { Sign::Minus } })
}

fn view() -> impl Strategy<Value = View> {
    prop::collection::btree_set(change(), 0..10).prop_map(View::new)
}

/// A chain of strictly growing views built from a shuffled list of changes.
fn chain() -> impl Strategy<Value = Vec<View>> {
    (prop::collection::btree_set(change(), 1..12), prop::collection::vec(any::<bool>(), 12)).prop_map(
        |(changes, cuts)| {
            let changes: Vec<Change> = changes.into_iter().collect();
            let mut out = Vec::new();
            for i in 1..=changes.len() {
                if cuts[i - 1] || i == changes.len() {
                    out.push(View::new(changes[..i].iter().copied()));
                }
            }
            out
        },
    )
}

#[test]
fn quorums_intersect_in_a_correct_process() {
    for n in 1..=100usize {
        let q = quorum_size(n).unwrap();
        let f = (n - 1) / 3;
        // Two quorums overlap in at least 2q - n members, more than the f faulty ones.
        assert!(2 * q > n + f, "n={n} q={q}");
        // The n - f correct members alone form a quorum.
        assert!(n - f >= q, "n={n} q={q}");
        assert!(q <= n);
    }
    assert!(quorum_size(0).is_err());
    let table = [(1, 1), (2, 2), (3, 3), (4, 3), (5, 4), (7, 5), (10, 7), (100, 67)];
    for (n, q) in table {
        assert_eq!(quorum_size(n).unwrap(), q, "n={n}");
    }
}

proptest! {
    #[test]
    fn compare_is_a_partial_order(a in view(), b in view(), c in view()) {
        prop_assert_eq!(a.compare(&a), ViewOrdering::Equal);
        let ab = a.compare(&b);
        let expected = match (a.is_subset(&b), b.is_subset(&a)) {
            (true, true) => ViewOrdering::Equal,
            (true, false) => ViewOrdering::Less,
            (false, true) => ViewOrdering::Greater,
            (false, false) => ViewOrdering::Incomparable,
        };
        prop_assert_eq!(ab, expected);
        let flipped = match ab {
            ViewOrdering::Less => ViewOrdering::Greater,
            ViewOrdering::Greater => ViewOrdering::Less,
            o => o,
        };
        prop_assert_eq!(b.compare(&a), flipped);
        if a.precedes(&b) && b.precedes(&c) {
            prop_assert!(a.precedes(&c));
        }
        let u = a.union(&b);
        prop_assert!(a.is_subset(&u) && b.is_subset(&u));
    }

    #[test]
    fn members_are_joined_and_not_left(v in view()) {
        for p in 1u32..12 {
            let p = ProcessId(p);
            let expected = v.contains_change(&Change::join(p)) && !v.contains_change(&Change::leave(p));
            prop_assert_eq!(v.is_member(p), expected);
        }
        prop_assert_eq!(v.size(), v.members().len());
    }

    #[test]
    fn chains_have_extremes(views in chain(), extra in view()) {
        let seq = ViewSequence::new(views.iter().cloned());
        prop_assert!(seq.is_sequence());
        prop_assert_eq!(seq.least_recent().unwrap(), views.first().unwrap());
        prop_assert_eq!(seq.most_recent().unwrap(), views.last().unwrap());
        let mut grown = seq.clone();
        grown.insert(extra.clone());
        let comparable_to_all = views.iter().all(|w| w.comparable(&extra));
        prop_assert_eq!(grown.is_sequence(), comparable_to_all);
        prop_assert_eq!(seq.conflicts_with(&ViewSequence::single(extra)), !comparable_to_all);
    }

    #[test]
    fn canonical_view_round_trip(v in view()) {
        let bytes = v.canonical_bytes();
        prop_assert_eq!(View::from_canonical(&bytes).unwrap(), v.clone());
        // Insertion order never affects the encoding.
        let reversed = View::new(v.changes().iter().rev().copied());
        prop_assert_eq!(reversed.canonical_bytes(), bytes);
    }

    #[test]
    fn signed_message_round_trip(v in view(), payload in prop::collection::vec(any::<u8>(), 0..64), seq in chain()) {
        let (ring, keys) = Keyring::generate(SignatureScheme::KeyedDigest, (1..=3).map(ProcessId), 1);
        let key = &keys[&ProcessId(2)];
        let payload = Payload(payload);
        let bodies = [
            Body::Prepare { payload: payload.clone(), view: v.clone() },
            Body::Ack { payload: payload.clone(), signature: key.sign(&ack_payload(&payload.0, &v)), view: v.clone() },
            Body::Deliver { payload: payload.clone(), view: v.clone() },
            Body::Converged { seq: ViewSequence::new(seq), view: v.clone() },
            Body::DiscoveryRequest,
        ];
        for body in bodies {
            let msg = SignedMessage::sign(key, body);
            let decoded = SignedMessage::decode(&msg.encode()).unwrap();
            prop_assert!(decoded.verify(&ring));
            prop_assert_eq!(decoded, msg);
        }
    }

    /// Certificates are checked against a direct count of distinct, genuine member signatures.
    #[test]
    fn certificate_matches_oracle(
        n in 1u32..8,
        signers in prop::collection::vec((1u32..10, 0u8..4), 0..10),
        wrong_payload in any::<bool>(),
    ) {
        let universe = 1..=9u32;
        let (ring, keys) = Keyring::generate(SignatureScheme::KeyedDigest, universe.map(ProcessId), 3);
        let v = View::initial((1..=n).map(ProcessId));
        let message = b"m".to_vec();
        let signed_over: &[u8] = if wrong_payload { b"other" } else { b"m" };
        let mut sigs = Vec::new();
        for &(p, mode) in &signers {
            let p = ProcessId(p);
            let sig = match mode {
                0 | 1 => keys[&p].sign(&ack_payload(signed_over, &v)),
                2 => Signature { signer: p, bytes: vec![0; 32] },
                _ => keys[&p].sign(&ack_payload(signed_over, &View::initial([ProcessId(99)]))),
            };
            sigs.push(sig);
        }
        let cer = MessageCertificate::assemble(&message, v.clone(), sigs);

        let q = (n - (n - 1) / 3) as usize;
        let mut first: BTreeMap<u32, u8> = BTreeMap::new();
        for &(p, mode) in &signers {
            first.entry(p).or_insert(mode);
        }
        let all_members = first.keys().all(|&p| p <= n);
        let all_genuine = first.values().all(|&m| m <= 1) && !wrong_payload;
        let expected = all_members && all_genuine && first.len() >= q;
        prop_assert_eq!(verify_certificate(&ring, &cer, &v, &message), expected);
        prop_assert!(!verify_certificate(&ring, &cer, &v, b"x"));
        let other = View::initial((1..=n + 1).map(ProcessId));
        prop_assert!(!verify_certificate(&ring, &cer, &other, &message));
    }
}

fn nodes(n: u32) -> BTreeMap<ProcessId, Node> {
    let ids: Vec<ProcessId> = (1..=n).map(ProcessId).collect();
    let v0 = View::initial(ids.iter().copied());
    let (ring, mut keys) = Keyring::generate(SignatureScheme::KeyedDigest, ids.iter().copied(), 5);
    ids.iter()
        .map(|&id| {
            let cfg = NodeConfig { id, initial_view: v0.clone(), sender: ProcessId(1) };
            (id, Node::new(cfg, keys.remove(&id).unwrap(), ring.clone()))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// A restored node has the same state and reacts to the same input identically.
    #[test]
    fn snapshot_round_trip(n in 4u32..7, payload in prop::collection::vec(any::<u8>(), 1..16)) {
        let mut all = nodes(n);
        let (_, keys) = Keyring::generate(SignatureScheme::KeyedDigest, (1..=n).map(ProcessId), 5);
        let sender = all.get_mut(&ProcessId(1)).unwrap();
        let out = sender.step(InputEvent::Invoke(Invocation::Broadcast(Payload(payload)))).unwrap();
        let prepare = out.iter().find_map(|a| match a {
            OutputAction::Send { message, .. } if matches!(message.body, Body::Prepare { .. }) => Some(message.clone()),
            _ => None,
        }).unwrap();

        let p2 = all.get_mut(&ProcessId(2)).unwrap();
        let before = p2.state_digest();
        let bytes = p2.snapshot();
        let ring = Keyring::generate(SignatureScheme::KeyedDigest, (1..=n).map(ProcessId), 5).0;
        let mut restored = Node::restore(&bytes, keys[&ProcessId(2)].clone(), ring.clone()).unwrap();
        prop_assert_eq!(restored.state_digest(), before);
        prop_assert!(Node::restore(&bytes, keys[&ProcessId(3)].clone(), ring).is_err());

        let event = InputEvent::Receive { from: ProcessId(1), message: prepare };
        let a = p2.step(event.clone()).unwrap();
        let b = restored.step(event).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(p2.state_digest(), restored.state_digest());
        prop_assert_ne!(p2.state_digest(), before);
    }
}

/// Drives a static group to delivery by hand, in FIFO order.
#[test]
fn static_group_delivers() {
    let mut all = nodes(4);
    let mut queue: std::collections::VecDeque<(ProcessId, ProcessId, SignedMessage)> = Default::default();
    let mut delivered: BTreeSet<ProcessId> = BTreeSet::new();
    let mut push = |from: ProcessId, out: Vec<OutputAction>, queue: &mut std::collections::VecDeque<_>| {
        for a in out {
            match a {
                OutputAction::Send { to, message } => queue.push_back((from, to, message)),
                OutputAction::Flood(message) => {
                    for to in (1..=4).map(ProcessId).filter(|&p| p != from) {
                        queue.push_back((from, to, message.clone()));
                    }
                }
                OutputAction::Callback(dbrb_core::Callback::Delivered(p)) => {
                    assert_eq!(p.0, b"hello");
                    assert!(delivered.insert(from), "{from} delivered twice");
                }
                _ => {}
            }
        }
    };
    let out = all
        .get_mut(&ProcessId(1))
        .unwrap()
        .step(InputEvent::Invoke(Invocation::Broadcast(Payload(b"hello".to_vec()))))
        .unwrap();
    push(ProcessId(1), out, &mut queue);
    while let Some((from, to, message)) = queue.pop_front() {
        let out = all.get_mut(&to).unwrap().step(InputEvent::Receive { from, message }).unwrap();
        push(to, out, &mut queue);
    }
    assert_eq!(delivered.len(), 4);
    assert!(all.values().all(|n| n.delivered() == Some(&Payload(b"hello".to_vec()))));
    // Only the designated sender may broadcast.
    assert!(all
        .get_mut(&ProcessId(2))
        .unwrap()
        .step(InputEvent::Invoke(Invocation::Broadcast(Payload(b"x".to_vec()))))
        .is_err());
}
