mod common;

use std::time::Duration;

use bytes::Bytes;
use common::{engine_scan, run_concurrent, small_config};
use lsmgraph::Engine;

#[test]
fn concurrent_readers_match_oracle_at_their_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.memgraph_bytes = 64 << 10;
    cfg.background_threads = 2;
    let e = Engine::open(cfg).unwrap();
    let r = run_concurrent(&e, 4, 4, 400, Duration::from_secs(3), 0, 11);
    assert_eq!(r.failures, 0, "{:?}", r.first_failure);
    assert_eq!(r.duplicates, 0);
    assert!(r.scans > 100 && r.writes > 1000, "scans {} writes {}", r.scans, r.writes);
    assert!(e.stats().flushes > 0);
    assert_eq!(e.background_error(), None);
}

#[test]
fn reads_stay_exact_while_index_updates_one_vertex_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.memgraph_bytes = 1 << 20;
    cfg.l0_limit = 3;
    let e = Engine::open(cfg).unwrap();
    for round in 0..3u64 {
        for s in 0..40u64 {
            e.insert_edge(s, s + round, Bytes::from(vec![round as u8])).unwrap();
            if round == 2 && s % 5 == 0 {
                e.delete_edge(s, s).unwrap();
            }
        }
        e.flush().unwrap();
    }
    let snap = e.snapshot();
    let expect: Vec<_> = (0..40).map(|s| engine_scan(&e, s, &snap)).collect();
    let mut pending = e.begin_compaction().unwrap().expect("l0 is full");
    assert_eq!(pending.job().source_level, 0);
    let check = |e: &Engine| {
        let now = e.snapshot();
        for s in 0..40u64 {
            assert_eq!(engine_scan(e, s, &now), expect[s as usize], "src {s}");
        }
    };
    check(&e);
    let mut steps = 0;
    while let Some(v) = pending.apply_next_vertex().unwrap() {
        let plan = e.read_plan(v).unwrap();
        assert!(plan.l0.is_empty(), "{plan:?}");
        check(&e);
        steps += 1;
    }
    assert_eq!(steps, 40);
    pending.finish().unwrap();
    check(&e);
    assert!(e.version().l0.is_empty());
}

#[test]
fn held_snapshot_survives_compaction() {
    let dir = tempfile::tempdir().unwrap();
    let e = Engine::open(small_config(dir.path())).unwrap();
    for i in 0..300u64 {
        e.insert_edge(i % 7, i, Bytes::from_static(b"old")).unwrap();
    }
    let snap = e.snapshot();
    let before: Vec<_> = (0..7).map(|s| engine_scan(&e, s, &snap)).collect();
    for i in 0..3000u64 {
        e.insert_edge(i % 7, i % 300, Bytes::from_static(b"new")).unwrap();
        if i % 50 == 0 {
            if let Ok(ts) = e.delete_edge(i % 7, (i + 7) % 300) {
                assert!(ts > snap.tau());
            }
        }
    }
    e.flush().unwrap();
    e.compact_until_idle().unwrap();
    assert!(e.stats().compactions > 0);
    for s in 0..7 {
        assert_eq!(engine_scan(&e, s, &snap), before[s as usize]);
    }
}
