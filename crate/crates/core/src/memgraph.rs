//! In-memory write cache for edge updates.
//!
//! A vertex's records start out in a fixed-size arena segment of `S` slots that
//! is allocated in edge-arrival order. The `(S+1)`-th record moves the vertex to
//! its own skip list keyed by `(dst, ts)`; the old segment is left in place as
//! dead space until the whole MemGraph is flushed.
//!
//! Writers to one source vertex must be serialized by the caller. Readers take no
//! per-vertex locks: arena slots are published by bumping an atomic length after
//! the slot is filled, and a skip list becomes visible only once it holds every
//! record that was in the arena.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use bytes::Bytes;
use crossbeam_skiplist::SkipMap;
use dashmap::DashMap;
use parking_lot::{Mutex, RwLock};

use crate::hash::VertexHashBuilder;
use crate::{Error, Result, Timestamp, VertexId};

pub const DEFAULT_ARENA_SEGMENT_RECORDS: usize = 4;
pub const DEFAULT_BUDGET_BYTES: usize = 64 << 20;

// Accounting model. The numbers approximate real heap use and are what
// `memory_usage` reports; they are part of the observable contract.
/// Charged once for an empty MemGraph.
pub const BASE_OVERHEAD_BYTES: usize = 4096;
/// Charged per vertex for its hash-table entry.
pub const VERTEX_ENTRY_BYTES: usize = 48;
/// Charged per arena slot; a whole segment is charged when it is allocated.
pub const ARENA_SLOT_BYTES: usize = 40;
/// Charged per skip-list record.
pub const SKIP_NODE_BYTES: usize = 96;

/// One versioned adjacency entry. An empty `prop` means "no property".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeRecord {
    pub dst: VertexId,
    pub ts: Timestamp,
    pub prop: Bytes,
    pub tombstone: bool,
}

impl EdgeRecord {
    pub fn live(dst: VertexId, ts: Timestamp, prop: impl Into<Bytes>) -> Self {
        EdgeRecord {
            dst,
            ts,
            prop: prop.into(),
            tombstone: false,
        }
    }

    pub fn tombstone(dst: VertexId, ts: Timestamp) -> Self {
        EdgeRecord {
            dst,
            ts,
            prop: Bytes::new(),
            tombstone: true,
        }
    }
}

/// Where a vertex's records currently live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeCursor {
    InArena { segment_id: u32, count: usize },
    InSkipList { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MemGraphError {
    #[error("MemGraph byte budget exhausted")]
    Full,
    #[error("MemGraph is sealed")]
    Sealed,
}

struct ArenaSegment {
    id: u32,
    len: AtomicUsize,
    slots: Box<[OnceLock<EdgeRecord>]>,
    dead: AtomicBool,
}

impl ArenaSegment {
    fn records(&self) -> impl Iterator<Item = &EdgeRecord> {
        let n = self.len.load(Ordering::Acquire);
        self.slots[..n].iter().filter_map(|s| s.get())
    }
}

struct VertexEdges {
    arena: Arc<ArenaSegment>,
    skip: OnceLock<SkipMap<(VertexId, Timestamp), EdgeRecord>>,
}

impl VertexEdges {
    fn count(&self) -> usize {
        match self.skip.get() {
            Some(s) => s.len(),
            None => self.arena.len.load(Ordering::Acquire),
        }
    }

    /// All records sorted by `(dst, ts)`, optionally bounded by `ts <= upto`.
    fn sorted_records(&self, upto: Timestamp) -> Vec<EdgeRecord> {
        match self.skip.get() {
            Some(s) => s
                .iter()
                .filter(|e| e.key().1 <= upto)
                .map(|e| e.value().clone())
                .collect(),
            None => {
                let mut v: Vec<EdgeRecord> = self
                    .arena
                    .records()
                    .filter(|r| r.ts <= upto)
                    .cloned()
                    .collect();
                v.sort_unstable_by_key(|r| (r.dst, r.ts));
                v
            }
        }
    }
}

pub struct MemGraph {
    id: u64,
    segment_records: usize,
    budget: usize,
    used: AtomicUsize,
    sealed: AtomicBool,
    gate: RwLock<()>,
    vertices: DashMap<VertexId, Arc<VertexEdges>, VertexHashBuilder>,
    arena: Mutex<Vec<Arc<ArenaSegment>>>,
    records: AtomicUsize,
    max_ts: AtomicU64,
}

impl std::fmt::Debug for MemGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemGraph")
            .field("id", &self.id)
            .field("records", &self.record_count())
            .field("bytes", &self.memory_usage())
            .field("sealed", &self.is_sealed())
            .finish()
    }
}

impl MemGraph {
    pub fn new(id: u64, budget: usize, segment_records: usize) -> Self {
        assert!(segment_records > 0, "arena segments need at least one slot");
        MemGraph {
            id,
            segment_records,
            budget,
            used: AtomicUsize::new(0),
            sealed: AtomicBool::new(false),
            gate: RwLock::new(()),
            vertices: DashMap::with_hasher(VertexHashBuilder),
            arena: Mutex::new(Vec::new()),
            records: AtomicUsize::new(0),
            max_ts: AtomicU64::new(0),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn segment_records(&self) -> usize {
        self.segment_records
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.record_count() == 0
    }

    pub fn record_count(&self) -> usize {
        self.records.load(Ordering::Acquire)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Largest timestamp stored so far (0 when empty).
    pub fn max_ts(&self) -> Timestamp {
        self.max_ts.load(Ordering::Acquire)
    }

    pub fn memory_usage(&self) -> usize {
        BASE_OVERHEAD_BYTES + self.used.load(Ordering::Acquire)
    }

    /// Number of arena segments ever allocated, including retired ones.
    pub fn arena_segments(&self) -> usize {
        self.arena.lock().len()
    }

    pub fn dead_arena_segments(&self) -> usize {
        self.arena
            .lock()
            .iter()
            .filter(|s| s.dead.load(Ordering::Relaxed))
            .count()
    }

    /// Closes the MemGraph to writers. Waits for in-flight inserts to finish, so
    /// once this returns the contents are final.
    pub fn seal(&self) {
        let _g = self.gate.write();
        self.sealed.store(true, Ordering::Release);
    }

    pub fn insert(
        &self,
        src: VertexId,
        dst: VertexId,
        prop: Bytes,
        ts: Timestamp,
        tombstone: bool,
    ) -> std::result::Result<(), MemGraphError> {
        self.insert_with(src, dst, prop, tombstone, || ts).map(|_| ())
    }

    /// Inserts a record whose timestamp is drawn from `next_ts` only after space
    /// has been reserved, while the MemGraph is still guaranteed to be unsealed.
    /// A `Full` or `Sealed` result never calls `next_ts`.
    pub fn insert_with(
        &self,
        src: VertexId,
        dst: VertexId,
        prop: Bytes,
        tombstone: bool,
        next_ts: impl FnOnce() -> Timestamp,
    ) -> std::result::Result<Timestamp, MemGraphError> {
        let _g = self.gate.read();
        if self.sealed.load(Ordering::Acquire) {
            return Err(MemGraphError::Sealed);
        }
        let entry = self.vertices.get(&src).map(|e| Arc::clone(e.value()));
        let s = self.segment_records;
        let plen = prop.len();
        let cost = match &entry {
            None => VERTEX_ENTRY_BYTES + s * ARENA_SLOT_BYTES + plen,
            Some(e) if e.skip.get().is_some() => SKIP_NODE_BYTES + plen,
            Some(e) => {
                let n = e.arena.len.load(Ordering::Acquire);
                if n < s {
                    plen
                } else {
                    (n + 1) * SKIP_NODE_BYTES + plen
                }
            }
        };
        self.reserve(cost)?;

        let ts = next_ts();
        let rec = EdgeRecord {
            dst,
            ts,
            prop,
            tombstone,
        };
        match entry {
            None => {
                let seg = {
                    let mut arena = self.arena.lock();
                    let seg = Arc::new(ArenaSegment {
                        id: arena.len() as u32,
                        len: AtomicUsize::new(0),
                        slots: (0..s).map(|_| OnceLock::new()).collect(),
                        dead: AtomicBool::new(false),
                    });
                    arena.push(Arc::clone(&seg));
                    seg
                };
                let _ = seg.slots[0].set(rec);
                seg.len.store(1, Ordering::Release);
                self.vertices.insert(
                    src,
                    Arc::new(VertexEdges {
                        arena: seg,
                        skip: OnceLock::new(),
                    }),
                );
            }
            Some(e) => match e.skip.get() {
                Some(list) => {
                    list.insert((rec.dst, rec.ts), rec);
                }
                None => {
                    let n = e.arena.len.load(Ordering::Acquire);
                    if n < s {
                        let _ = e.arena.slots[n].set(rec);
                        e.arena.len.store(n + 1, Ordering::Release);
                    } else {
                        let list = SkipMap::new();
                        for r in e.arena.records() {
                            list.insert((r.dst, r.ts), r.clone());
                        }
                        list.insert((rec.dst, rec.ts), rec);
                        if e.skip.set(list).is_err() {
                            unreachable!("concurrent writers on one vertex");
                        }
                        e.arena.dead.store(true, Ordering::Release);
                    }
                }
            },
        }
        self.max_ts.fetch_max(ts, Ordering::AcqRel);
        self.records.fetch_add(1, Ordering::AcqRel);
        Ok(ts)
    }

    fn reserve(&self, cost: usize) -> std::result::Result<(), MemGraphError> {
        let room = self.budget.saturating_sub(BASE_OVERHEAD_BYTES);
        self.used
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |used| {
                (used + cost <= room).then_some(used + cost)
            })
            .map(|_| ())
            .map_err(|_| MemGraphError::Full)
    }

    /// Visible adjacency of `src` at `upto`: newest record per destination,
    /// tombstoned destinations removed, ascending by destination.
    pub fn scan(&self, src: VertexId, upto: Timestamp) -> Vec<EdgeRecord> {
        let mut out: Vec<EdgeRecord> = Vec::new();
        for r in self.records_upto(src, upto) {
            match out.last_mut() {
                Some(last) if last.dst == r.dst => *last = r,
                _ => out.push(r),
            }
        }
        out.retain(|r| !r.tombstone);
        out
    }

    /// Every stored record of `src` with `ts <= upto`, sorted by `(dst, ts)`,
    /// tombstones included.
    pub fn records_upto(&self, src: VertexId, upto: Timestamp) -> Vec<EdgeRecord> {
        match self.vertices.get(&src).map(|e| Arc::clone(e.value())) {
            Some(e) => e.sorted_records(upto),
            None => Vec::new(),
        }
    }

    /// Newest record (possibly a tombstone) for `(src, dst)` with `ts <= upto`.
    pub fn get(&self, src: VertexId, dst: VertexId, upto: Timestamp) -> Option<EdgeRecord> {
        let e = self.vertices.get(&src).map(|e| Arc::clone(e.value()))?;
        match e.skip.get() {
            Some(list) => list
                .range((dst, 0)..=(dst, upto))
                .next_back()
                .map(|e| e.value().clone()),
            None => e
                .arena
                .records()
                .filter(|r| r.dst == dst && r.ts <= upto)
                .max_by_key(|r| r.ts)
                .cloned(),
        }
    }

    pub fn storage_mode(&self, src: VertexId) -> Option<EdgeCursor> {
        let e = self.vertices.get(&src).map(|e| Arc::clone(e.value()))?;
        Some(match e.skip.get() {
            Some(list) => EdgeCursor::InSkipList { count: list.len() },
            None => EdgeCursor::InArena {
                segment_id: e.arena.id,
                count: e.arena.len.load(Ordering::Acquire),
            },
        })
    }

    /// Number of records stored for `src`, all versions included.
    pub fn degree(&self, src: VertexId) -> usize {
        self.vertices.get(&src).map_or(0, |e| e.count())
    }

    pub fn vertex_ids(&self) -> Vec<VertexId> {
        let mut ids: Vec<VertexId> = self.vertices.iter().map(|e| *e.key()).collect();
        ids.sort_unstable();
        ids
    }

    /// Every record in `(src, dst, ts)` order. Only valid once sealed.
    pub fn drain_sorted(&self) -> Result<DrainSorted<'_>> {
        if !self.is_sealed() {
            return Err(Error::Contract(
                "drain_sorted on an unsealed MemGraph".into(),
            ));
        }
        let ids = self.vertex_ids();
        Ok(DrainSorted {
            mg: self,
            ids: ids.into_iter(),
            current: Vec::new().into_iter(),
            src: 0,
        })
    }
}

pub struct DrainSorted<'a> {
    mg: &'a MemGraph,
    ids: std::vec::IntoIter<VertexId>,
    current: std::vec::IntoIter<EdgeRecord>,
    src: VertexId,
}

impl Iterator for DrainSorted<'_> {
    type Item = (VertexId, EdgeRecord);

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(r) = self.current.next() {
                return Some((self.src, r));
            }
            self.src = self.ids.next()?;
            self.current = self
                .mg
                .records_upto(self.src, Timestamp::MAX)
                .into_iter();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mg(s: usize) -> MemGraph {
        MemGraph::new(1, DEFAULT_BUDGET_BYTES, s)
    }

    fn add(m: &MemGraph, src: u64, dst: u64, ts: u64) {
        m.insert(src, dst, Bytes::new(), ts, false).unwrap();
    }

    #[test]
    fn first_edge_takes_first_arena_segment() {
        let m = mg(2);
        add(&m, 3, 0, 1);
        assert_eq!(
            m.storage_mode(3),
            Some(EdgeCursor::InArena {
                segment_id: 0,
                count: 1
            })
        );
    }

    #[test]
    fn third_edge_moves_vertex_to_skip_list() {
        let m = mg(2);
        add(&m, 3, 0, 1);
        add(&m, 0, 1, 2);
        add(&m, 0, 2, 3);
        assert!(matches!(
            m.storage_mode(0),
            Some(EdgeCursor::InArena { count: 2, .. })
        ));
        add(&m, 0, 4, 4);
        assert_eq!(m.storage_mode(0), Some(EdgeCursor::InSkipList { count: 3 }));
        assert_eq!(m.dead_arena_segments(), 1);
        let dsts: Vec<_> = m.scan(0, 10).iter().map(|r| r.dst).collect();
        assert_eq!(dsts, vec![1, 2, 4]);
    }

    #[test]
    fn versions_of_one_edge_are_kept() {
        let m = mg(4);
        m.insert(1, 2, Bytes::from_static(b"a"), 1, false).unwrap();
        m.insert(1, 2, Bytes::from_static(b"b"), 2, false).unwrap();
        assert_eq!(m.degree(1), 2);
        assert_eq!(m.scan(1, 2)[0].prop, Bytes::from_static(b"b"));
        assert_eq!(m.scan(1, 1)[0].prop, Bytes::from_static(b"a"));
    }

    #[test]
    fn tombstone_visibility_follows_snapshot() {
        let m = mg(4);
        add(&m, 9, 5, 1);
        m.insert(9, 5, Bytes::new(), 3, true).unwrap();
        assert_eq!(m.scan(9, 2).len(), 1);
        assert!(m.scan(9, 3).is_empty());
        assert!(m.get(9, 5, 3).unwrap().tombstone);
        assert!(!m.get(9, 5, 2).unwrap().tombstone);
        assert!(m.get(9, 5, 0).is_none());
    }

    #[test]
    fn absent_vertex_scans_empty() {
        let m = mg(4);
        assert!(m.scan(42, u64::MAX).is_empty());
        assert_eq!(m.storage_mode(42), None);
    }

    #[test]
    fn random_scan_matches_map_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for s in [1usize, 2, 4, 8] {
            let m = mg(s);
            let mut oracle: BTreeMap<u64, (u64, bool)> = BTreeMap::new();
            for ts in 1..=100u64 {
                let dst = rng.gen_range(0..30);
                let del = rng.gen_bool(0.2);
                m.insert(0, dst, Bytes::new(), ts, del).unwrap();
                oracle.insert(dst, (ts, del));
            }
            let expect: Vec<u64> = oracle
                .iter()
                .filter(|(_, (_, del))| !del)
                .map(|(d, _)| *d)
                .collect();
            let got: Vec<u64> = m.scan(0, u64::MAX).iter().map(|r| r.dst).collect();
            assert_eq!(got, expect, "segment size {s}");
        }
    }

    #[test]
    fn drain_requires_seal_and_is_globally_sorted() {
        let m = mg(4);
        add(&m, 1, 3, 1);
        add(&m, 0, 9, 2);
        add(&m, 1, 2, 3);
        assert!(matches!(m.drain_sorted(), Err(Error::Contract(_))));
        m.seal();
        let got: Vec<(u64, u64)> = m.drain_sorted().unwrap().map(|(s, r)| (s, r.dst)).collect();
        assert_eq!(got, vec![(0, 9), (1, 2), (1, 3)]);
        assert_eq!(
            m.insert(5, 5, Bytes::new(), 9, false),
            Err(MemGraphError::Sealed)
        );
    }

    #[test]
    fn empty_drain() {
        let m = mg(4);
        m.seal();
        assert_eq!(m.drain_sorted().unwrap().count(), 0);
    }

    #[test]
    fn drain_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = mg(4);
        let mut all = Vec::new();
        for ts in 1..=10_000u64 {
            let (s, d) = (rng.gen_range(0..500), rng.gen_range(0..500));
            let del = rng.gen_bool(0.05);
            m.insert(s, d, Bytes::new(), ts, del).unwrap();
            all.push((s, d, ts, del));
        }
        m.seal();
        all.sort_unstable();
        let got: Vec<_> = m
            .drain_sorted()
            .unwrap()
            .map(|(s, r)| (s, r.dst, r.ts, r.tombstone))
            .collect();
        assert_eq!(got, all);
    }

    #[test]
    fn memory_accounting_formula() {
        let m = mg(4);
        assert_eq!(m.memory_usage(), BASE_OVERHEAD_BYTES);
        m.insert(1, 2, Bytes::from_static(b"xyz"), 1, false).unwrap();
        assert_eq!(
            m.memory_usage(),
            BASE_OVERHEAD_BYTES + VERTEX_ENTRY_BYTES + 4 * ARENA_SLOT_BYTES + 3
        );
        let before = m.memory_usage();
        for ts in 2..=4 {
            add(&m, 1, ts, ts);
        }
        assert_eq!(m.memory_usage(), before);
        add(&m, 1, 99, 5);
        assert_eq!(m.memory_usage(), before + 5 * SKIP_NODE_BYTES);
        add(&m, 1, 100, 6);
        assert_eq!(m.memory_usage(), before + 6 * SKIP_NODE_BYTES);
    }

    #[test]
    fn full_rejects_without_inserting() {
        let budget = BASE_OVERHEAD_BYTES + VERTEX_ENTRY_BYTES + 4 * ARENA_SLOT_BYTES;
        let m = MemGraph::new(1, budget, 4);
        add(&m, 1, 1, 1);
        let mut called = false;
        let r = m.insert_with(2, 1, Bytes::new(), false, || {
            called = true;
            2
        });
        assert_eq!(r, Err(MemGraphError::Full));
        assert!(!called);
        assert_eq!(m.record_count(), 1);
        assert_eq!(m.storage_mode(2), None);
    }

    #[test]
    fn concurrent_writers_on_distinct_vertices() {
        let m = Arc::new(mg(4));
        let clock = Arc::new(AtomicU64::new(1));
        std::thread::scope(|s| {
            for w in 0..4u64 {
                let m = Arc::clone(&m);
                let clock = Arc::clone(&clock);
                s.spawn(move || {
                    for i in 0..2000u64 {
                        let src = w * 1000 + i % 50;
                        m.insert_with(src, i, Bytes::new(), false, || {
                            clock.fetch_add(1, Ordering::SeqCst)
                        })
                        .unwrap();
                    }
                });
            }
            let m = Arc::clone(&m);
            s.spawn(move || {
                for _ in 0..200 {
                    for v in 0..50 {
                        let got = m.scan(v, u64::MAX);
                        assert!(got.windows(2).all(|w| w[0].dst < w[1].dst));
                    }
                }
            });
        });
        assert_eq!(m.record_count(), 8000);
        for w in 0..4u64 {
            for v in 0..50 {
                assert_eq!(m.scan(w * 1000 + v, u64::MAX).len(), 40);
            }
        }
    }
}
