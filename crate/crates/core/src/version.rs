//! Timestamps, snapshots and the version chain.
//!
//! A [`Version`] names the readable in-memory and L0 state: the MemGraphs
//! (active first) and the L0 segments. It also carries the sorted-level layout so
//! that index-free reads have a consistent view. Versions are immutable; a
//! publish copies the current one, applies a delta and swaps it in.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use parking_lot::{Mutex, RwLock};

use crate::memgraph::MemGraph;
use crate::segment::Segment;
use crate::{FileId, Timestamp, VertexId};

/// Issues write timestamps and tracks which of them are committed.
///
/// The visible watermark is the largest `t` such that every write with
/// timestamp `<= t` has finished. Snapshots read at the watermark, so they never
/// see a gap left by a write that is still in flight.
#[derive(Debug)]
pub struct CommitClock {
    state: Mutex<ClockState>,
    visible: AtomicU64,
}

#[derive(Debug)]
struct ClockState {
    next: Timestamp,
    inflight: BTreeSet<Timestamp>,
}

impl CommitClock {
    /// A clock whose first timestamp is `last + 1`.
    pub fn new(last: Timestamp) -> Self {
        CommitClock {
            state: Mutex::new(ClockState {
                next: last + 1,
                inflight: BTreeSet::new(),
            }),
            visible: AtomicU64::new(last),
        }
    }

    pub fn begin(&self) -> Timestamp {
        let mut s = self.state.lock();
        let ts = s.next;
        s.next += 1;
        s.inflight.insert(ts);
        ts
    }

    pub fn finish(&self, ts: Timestamp) {
        let mut s = self.state.lock();
        s.inflight.remove(&ts);
        let v = match s.inflight.first() {
            Some(&oldest) => oldest - 1,
            None => s.next - 1,
        };
        self.visible.store(v, Ordering::Release);
    }

    pub fn visible(&self) -> Timestamp {
        self.visible.load(Ordering::Acquire)
    }

    /// Last timestamp handed out.
    pub fn issued(&self) -> Timestamp {
        self.state.lock().next - 1
    }
}

/// Multiset of the read timestamps of live snapshots.
#[derive(Debug, Default)]
pub struct SnapshotRegistry {
    active: Mutex<BTreeMap<Timestamp, usize>>,
}

impl SnapshotRegistry {
    /// Registers a reader at the current watermark and returns its timestamp.
    pub fn acquire(&self, clock: &CommitClock) -> Timestamp {
        let mut a = self.active.lock();
        let tau = clock.visible();
        *a.entry(tau).or_default() += 1;
        tau
    }

    pub fn release(&self, tau: Timestamp) {
        let mut a = self.active.lock();
        if let Some(n) = a.get_mut(&tau) {
            *n -= 1;
            if *n == 0 {
                a.remove(&tau);
            }
        }
    }

    /// Oldest timestamp any current or future reader may use.
    pub fn horizon(&self, clock: &CommitClock) -> Timestamp {
        let a = self.active.lock();
        let visible = clock.visible();
        a.keys().next().map_or(visible, |&t| t.min(visible))
    }

    pub fn active_count(&self) -> usize {
        self.active.lock().values().sum()
    }
}

/// A read view at timestamp `tau`. Reads through it see exactly the records
/// with `ts <= tau`. While it lives, compaction keeps every version it needs.
pub struct Snapshot {
    tau: Timestamp,
    vertex_bound: VertexId,
    registry: Arc<SnapshotRegistry>,
}

impl Snapshot {
    pub(crate) fn new(registry: Arc<SnapshotRegistry>, tau: Timestamp, vertex_bound: VertexId) -> Self {
        Snapshot {
            tau,
            vertex_bound,
            registry,
        }
    }

    pub fn tau(&self) -> Timestamp {
        self.tau
    }

    /// One past the largest vertex ID that existed when the snapshot was taken.
    pub fn vertex_bound(&self) -> VertexId {
        self.vertex_bound
    }
}

impl Clone for Snapshot {
    fn clone(&self) -> Self {
        let mut a = self.registry.active.lock();
        *a.entry(self.tau).or_default() += 1;
        Snapshot {
            tau: self.tau,
            vertex_bound: self.vertex_bound,
            registry: Arc::clone(&self.registry),
        }
    }
}

impl Drop for Snapshot {
    fn drop(&mut self) {
        self.registry.release(self.tau);
    }
}

impl std::fmt::Debug for Snapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Snapshot")
            .field("tau", &self.tau)
            .field("vertex_bound", &self.vertex_bound)
            .finish()
    }
}

/// Segments per sorted level; index 0 is unused and always empty.
pub type LevelLayout = Arc<Vec<Vec<Arc<Segment>>>>;

#[derive(Debug)]
pub struct Version {
    pub id: u64,
    /// Active MemGraph first, then sealed ones awaiting flush, newest first.
    pub memgraphs: Vec<Arc<MemGraph>>,
    /// Ascending by fid.
    pub l0: Vec<Arc<Segment>>,
    pub levels: LevelLayout,
}

impl Version {
    pub fn active(&self) -> &Arc<MemGraph> {
        &self.memgraphs[0]
    }

    pub fn l0_fids(&self) -> Vec<FileId> {
        self.l0.iter().map(|s| s.fid()).collect()
    }

    pub fn memgraph_ids(&self) -> Vec<u64> {
        self.memgraphs.iter().map(|m| m.id()).collect()
    }
}

#[derive(Debug)]
pub enum VersionDelta {
    AddMemGraph(Arc<MemGraph>),
    FlushDone {
        memgraph: u64,
        segment: Option<Arc<Segment>>,
    },
    CompactionDone {
        removed_l0: Vec<FileId>,
        levels: LevelLayout,
    },
}

pub struct VersionSet {
    current: RwLock<Arc<Version>>,
    publish: Mutex<Vec<Weak<Version>>>,
}

impl VersionSet {
    pub fn new(initial: Version) -> Self {
        let v = Arc::new(initial);
        VersionSet {
            publish: Mutex::new(vec![Arc::downgrade(&v)]),
            current: RwLock::new(v),
        }
    }

    pub fn current(&self) -> Arc<Version> {
        Arc::clone(&self.current.read())
    }

    pub fn publish(&self, delta: VersionDelta) -> Arc<Version> {
        let mut chain = self.publish.lock();
        let cur = self.current();
        let mut memgraphs = cur.memgraphs.clone();
        let mut l0 = cur.l0.clone();
        let mut levels = Arc::clone(&cur.levels);
        match delta {
            VersionDelta::AddMemGraph(mg) => memgraphs.insert(0, mg),
            VersionDelta::FlushDone { memgraph, segment } => {
                memgraphs.retain(|m| m.id() != memgraph);
                if let Some(s) = segment {
                    let at = l0.partition_point(|x| x.fid() < s.fid());
                    l0.insert(at, s);
                }
            }
            VersionDelta::CompactionDone {
                removed_l0,
                levels: new_levels,
            } => {
                l0.retain(|s| !removed_l0.contains(&s.fid()));
                levels = new_levels;
            }
        }
        let next = Arc::new(Version {
            id: cur.id + 1,
            memgraphs,
            l0,
            levels,
        });
        chain.retain(|w| w.strong_count() > 0);
        chain.push(Arc::downgrade(&next));
        *self.current.write() = Arc::clone(&next);
        next
    }

    /// Versions still referenced by someone, the current one included.
    pub fn live_versions(&self) -> usize {
        self.publish
            .lock()
            .iter()
            .filter(|w| w.strong_count() > 0)
            .count()
    }
}
