use std::fs::OpenOptions;
use std::io::Write;

use proptest::prelude::*;
use statechef::manifest::{SampleRecord, Source};
use statechef::taxonomy::Taxonomy;
use statechef_labeling::store::{LOG_FILE, SNAPSHOT_FILE};
use statechef_labeling::{Decision, LabelProposal, ProposalStatus, ProposalStore, ScoredState, StoreError};

fn proposals(n: usize) -> Vec<LabelProposal> {
    (0..n)
        .map(|i| {
            let record = SampleRecord::new(
                format!("img-{i:03}"),
                format!("img-{i:03}.png"),
                "onion",
                "whole",
                Source::Imagenet,
            );
            LabelProposal::pending(
                record,
                vec![
                    ScoredState {
                        state: "sliced".into(),
                        probability: 0.5,
                    },
                    ScoredState {
                        state: "diced".into(),
                        probability: 0.3,
                    },
                    ScoredState {
                        state: "whole".into(),
                        probability: 0.2,
                    },
                ],
                "whole-best",
            )
        })
        .collect()
}

#[derive(Clone, Debug)]
enum Op {
    Decide {
        session: usize,
        proposal: usize,
        decision: u8,
        stale: bool,
    },
    Open,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        8 => (0usize..3, 0usize..12, 0u8..5, prop::bool::weighted(0.15))
            .prop_map(|(session, proposal, decision, stale)| Op::Decide { session, proposal, decision, stale }),
        1 => Just(Op::Open),
    ]
}

fn decision(code: u8) -> Decision {
    match code {
        0 => Decision::Accept,
        1 => Decision::Override { state: "diced".into() },
        2 => Decision::Discard,
        3 => Decision::Reopen,
        _ => Decision::Override { state: "other".into() },
    }
}

/// Runs `ops`, returning the number of acknowledged decisions.
fn drive(store: &mut ProposalStore, ops: &[Op]) -> usize {
    let mut sessions = vec![store.open_session("r0").unwrap().session_id];
    let mut acked = 0;
    for op in ops {
        match op {
            Op::Open => sessions.push(store.open_session(&format!("r{}", sessions.len())).unwrap().session_id),
            Op::Decide {
                session,
                proposal,
                decision: d,
                stale,
            } => {
                let sid = &sessions[session % sessions.len()];
                let version = store.session(sid).unwrap().version;
                let expected = if *stale { version.wrapping_sub(1) } else { version };
                let before = store.state().clone();
                match store.decide(sid, &format!("img-{proposal:03}"), decision(*d), expected) {
                    Ok(_) => acked += 1,
                    Err(e) => {
                        assert!(!matches!(e, StoreError::Io { .. } | StoreError::Corrupt { .. }), "{e}");
                        assert_eq!(store.state(), &before, "rejected decision changed the store");
                    }
                }
            }
        }
    }
    acked
}

fn check_invariants(store: &ProposalStore) {
    for s in store.state().sessions.values() {
        assert_eq!(store.audit(Some(&s.session_id)).len() as u64, s.version);
    }
    for p in store.state().proposals.values() {
        assert!(p.proposed.windows(2).all(|w| w[0].probability >= w[1].probability));
        match p.status {
            ProposalStatus::Accepted => assert_eq!(p.final_state.as_deref(), Some(p.top_state())),
            ProposalStatus::Overridden => {
                let f = p.final_state.as_deref().unwrap();
                assert_ne!(f, p.top_state());
            }
            ProposalStatus::Pending | ProposalStatus::Discarded => assert!(p.final_state.is_none()),
        }
    }
    let exported = store.export(None).unwrap();
    for r in &exported.records {
        let p = store.proposal(&r.id).unwrap();
        assert!(matches!(
            p.status,
            ProposalStatus::Accepted | ProposalStatus::Overridden
        ));
        assert_eq!(Some(&r.state), p.final_state.as_ref());
    }
    let decided = store.counts().accepted + store.counts().overridden;
    assert_eq!(exported.records.len(), decided);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn crash_restart_recovers_identical_store(
        ops in prop::collection::vec(op(), 0..60),
        snapshot_every in 1u64..20,
        torn in prop::option::of("[a-z{\":,]{1,40}"),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ProposalStore::open(dir.path(), Taxonomy::canonical()).unwrap().with_snapshot_every(snapshot_every);
        store.add_proposals("job-1", proposals(12)).unwrap();
        let acked = drive(&mut store, &ops);
        check_invariants(&store);
        let expected = store.state().clone();
        prop_assert_eq!(expected.audit.len(), acked);
        drop(store);

        // A write interrupted by the crash leaves an unterminated line.
        if let Some(tail) = torn {
            let mut f = OpenOptions::new().append(true).open(dir.path().join(LOG_FILE)).unwrap();
            f.write_all(tail.as_bytes()).unwrap();
        }
        let reopened = ProposalStore::open(dir.path(), Taxonomy::canonical()).unwrap();
        prop_assert_eq!(reopened.state(), &expected);
        check_invariants(&reopened);
        drop(reopened);

        // Recovery is idempotent, including without the snapshot.
        let again = ProposalStore::open(dir.path(), Taxonomy::canonical()).unwrap();
        prop_assert_eq!(again.state(), &expected);
        drop(again);
        let _ = std::fs::remove_file(dir.path().join(SNAPSHOT_FILE));
        let from_log = ProposalStore::open(dir.path(), Taxonomy::canonical()).unwrap();
        prop_assert_eq!(from_log.state(), &expected);
    }
}

#[test]
fn writes_after_recovery_continue_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ProposalStore::open(dir.path(), Taxonomy::canonical()).unwrap();
    store.add_proposals("job-1", proposals(3)).unwrap();
    let s = store.open_session("ana").unwrap();
    store.decide(&s.session_id, "img-000", Decision::Accept, 0).unwrap();
    drop(store);
    let mut f = OpenOptions::new().append(true).open(dir.path().join(LOG_FILE)).unwrap();
    f.write_all(b"{\"seq\":4,\"event\":\"dec").unwrap();
    drop(f);

    let mut store = ProposalStore::open(dir.path(), Taxonomy::canonical()).unwrap();
    store.decide(&s.session_id, "img-001", Decision::Discard, 1).unwrap();
    let expected = store.state().clone();
    drop(store);
    let store = ProposalStore::open(dir.path(), Taxonomy::canonical()).unwrap();
    assert_eq!(store.state(), &expected);
    assert_eq!(store.session(&s.session_id).unwrap().version, 2);
}

#[test]
fn corruption_inside_the_log_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ProposalStore::open(dir.path(), Taxonomy::canonical()).unwrap();
    store.add_proposals("job-1", proposals(2)).unwrap();
    store.open_session("ana").unwrap();
    drop(store);
    let path = dir.path().join(LOG_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, format!("garbage\n{text}")).unwrap();
    assert!(matches!(
        ProposalStore::open(dir.path(), Taxonomy::canonical()),
        Err(StoreError::Corrupt { line: 1, .. })
    ));
}

#[test]
fn stale_version_leaves_store_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ProposalStore::open(dir.path(), Taxonomy::canonical()).unwrap();
    store.add_proposals("job-1", proposals(2)).unwrap();
    let s = store.open_session("ana").unwrap();
    store.decide(&s.session_id, "img-000", Decision::Accept, 0).unwrap();
    let before = store.state().clone();
    let err = store.decide(&s.session_id, "img-001", Decision::Accept, 0).unwrap_err();
    assert!(err.is_retryable());
    assert_eq!(store.state(), &before);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
}
