mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use bytes::Bytes;
use common::small_config;
use lsmgraph::analytics::{self, Values, NO_COMPONENT, UNVISITED};
use lsmgraph::Engine;
use proptest::prelude::*;

type Adj = BTreeMap<u64, BTreeMap<u64, f64>>;

fn build(edges: &[(u64, u64, u8)], weighted: bool) -> (tempfile::TempDir, Engine, Adj) {
    let dir = tempfile::tempdir().unwrap();
    let e = Engine::open(small_config(dir.path())).unwrap();
    let mut adj = Adj::new();
    for (i, &(s, d, w)) in edges.iter().enumerate() {
        let w = w as f64 / 4.0;
        let prop = if weighted { Bytes::copy_from_slice(&w.to_le_bytes()) } else { Bytes::new() };
        e.insert_edge(s, d, prop).unwrap();
        adj.entry(s).or_default().insert(d, if weighted { w } else { 1.0 });
        if i % 97 == 0 {
            e.flush().unwrap();
        }
    }
    e.compact_until_idle().unwrap();
    (dir, e, adj)
}

fn oracle_bfs(adj: &Adj, src: u64, n: usize) -> Vec<u64> {
    let mut lvl = vec![UNVISITED; n];
    lvl[src as usize] = 0;
    let mut q = VecDeque::from([src]);
    while let Some(v) = q.pop_front() {
        for &d in adj.get(&v).into_iter().flat_map(|m| m.keys()) {
            if lvl[d as usize] == UNVISITED {
                lvl[d as usize] = lvl[v as usize] + 1;
                q.push_back(d);
            }
        }
    }
    lvl
}

/// Bellman-Ford, independent of the heap-based implementation under test.
fn oracle_sssp(adj: &Adj, src: u64, n: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; n];
    dist[src as usize] = 0.0;
    for _ in 0..n {
        let mut changed = false;
        for (&s, m) in adj {
            for (&d, &w) in m {
                if dist[s as usize] + w < dist[d as usize] {
                    dist[d as usize] = dist[s as usize] + w;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    dist
}

/// Label propagation to a fixpoint over the undirected view.
fn oracle_cc(adj: &Adj, n: usize) -> Vec<u64> {
    let mut present = vec![false; n];
    let mut label: Vec<u64> = (0..n as u64).collect();
    for (&s, m) in adj {
        present[s as usize] = true;
        for &d in m.keys() {
            present[d as usize] = true;
        }
    }
    loop {
        let mut changed = false;
        for (&s, m) in adj {
            for &d in m.keys() {
                let l = label[s as usize].min(label[d as usize]);
                for x in [s, d] {
                    if label[x as usize] != l {
                        label[x as usize] = l;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    (0..n).map(|v| if present[v] { label[v] } else { NO_COMPONENT }).collect()
}

fn edge_strategy() -> impl Strategy<Value = Vec<(u64, u64, u8)>> {
    proptest::collection::vec((0u64..60, 0u64..60, 0u8..40), 1..500)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bfs_and_sssp_match_reference(edges in edge_strategy()) {
        let (_d, e, adj) = build(&edges, true);
        let snap = e.snapshot();
        let n = snap.vertex_bound() as usize;
        let src = edges[0].0;
        let Values::Levels(l) = analytics::bfs(&e, &snap, src).unwrap().values else { unreachable!() };
        prop_assert_eq!(l, oracle_bfs(&adj, src, n));
        let Values::Distances(d) = analytics::sssp(&e, &snap, src).unwrap().values else { unreachable!() };
        let want = oracle_sssp(&adj, src, n);
        for (a, b) in d.iter().zip(&want) {
            prop_assert!(a == b || (a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn cc_and_scan_match_reference(edges in edge_strategy()) {
        let (_d, e, adj) = build(&edges, false);
        let snap = e.snapshot();
        let r = analytics::cc(&e, &snap).unwrap();
        let Values::Labels(l) = &r.values else { unreachable!() };
        prop_assert_eq!(l, &oracle_cc(&adj, snap.vertex_bound() as usize));
        let distinct: BTreeSet<(u64, u64)> = edges.iter().map(|&(s, d, _)| (s, d)).collect();
        let s = analytics::scan_all(&e, &snap).unwrap();
        prop_assert_eq!(s.edges, distinct.len() as u64);
        let sum = distinct.iter().fold(0u64, |a, &(s, d)| a.wrapping_add(analytics::edge_digest(s, d)));
        prop_assert_eq!(s.checksum, sum);
    }
}

#[test]
fn rerun_on_same_snapshot_is_identical_under_writes() {
    let edges: Vec<_> = (0..3000u64).map(|i| (i % 211, (i * 7919) % 400, (i % 13) as u8)).collect();
    let (_d, e, _) = build(&edges, true);
    let snap = e.snapshot();
    let first = analytics::sssp(&e, &snap, 0).unwrap();
    for i in 0..5000u64 {
        e.insert_edge(i % 400, (i * 31) % 400, Bytes::copy_from_slice(&0.1f64.to_le_bytes())).unwrap();
    }
    e.flush().unwrap();
    e.compact_until_idle().unwrap();
    let again = analytics::sssp(&e, &snap, 0).unwrap();
    assert_eq!(first.checksum, again.checksum);
    assert_eq!(first.values, again.values);
    assert_ne!(analytics::sssp(&e, &e.snapshot(), 0).unwrap().checksum, first.checksum);
}
