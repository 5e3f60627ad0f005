//! The storage engine facade.
//!
//! Writes go to the active MemGraph under a per-vertex write permit. When it
//! fills up it is sealed, a fresh one takes over, and the sealed one is flushed
//! to an L0 segment. At most one sealed MemGraph waits for flush at a time;
//! writers stall until it is gone. Compaction runs one job at a time and commits
//! in this order: durable outputs, manifest, per-vertex index updates, new
//! version, then release of the inputs.
//!
//! Unflushed writes are not durable: there is no write-ahead log. A clean
//! [`Engine::close`] flushes everything.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use bytes::Bytes;
use hdrhistogram::Histogram;
use parking_lot::{Condvar, Mutex, MutexGuard, RwLock};

use crate::hash::mix64;
use crate::io::{IoCounters, IoStats};
use crate::levels::{self, CompactionJob, LevelsConfig, Manifest, MergeParams};
use crate::memgraph::{self, MemGraph, MemGraphError};
use crate::mlindex::{MultiLevelIndex, Position, MAX_OVERFLOW_POSITIONS};
use crate::segment::{EdgeBody, Segment, SegmentBuilder};
use crate::version::{
    CommitClock, LevelLayout, Snapshot, SnapshotRegistry, Version, VersionDelta, VersionSet,
};
use crate::vertex::VertexTable;
use crate::{bloom, Error, FileId, Result, Timestamp, VertexId};

const WRITE_PERMITS: usize = 4096;

/// Deliberate defects for exercising the verifier. Not for production use.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    /// Flushes drop tombstones, resurrecting deleted edges once they leave memory.
    SkipTombstones,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub data_dir: PathBuf,
    pub memgraph_bytes: usize,
    pub level_factor: u64,
    /// Sorted levels below L0.
    pub max_levels: usize,
    pub l0_limit: usize,
    pub segment_target_bytes: u64,
    pub arena_segment_records: usize,
    pub bloom_bits_per_key: usize,
    /// Advisory; the engine accepts writes from any number of threads.
    pub writer_threads: usize,
    /// 0 runs flush and compaction only when asked (or when a writer must wait for a flush).
    pub background_threads: usize,
    pub auto_create_vertices: bool,
    pub use_mlindex: bool,
    #[doc(hidden)]
    pub fault: Option<FaultInjection>,
}

impl EngineConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        EngineConfig {
            data_dir: data_dir.into(),
            memgraph_bytes: memgraph::DEFAULT_BUDGET_BYTES,
            level_factor: levels::DEFAULT_LEVEL_FACTOR,
            max_levels: levels::DEFAULT_MAX_LEVELS,
            l0_limit: levels::DEFAULT_L0_LIMIT,
            segment_target_bytes: levels::DEFAULT_SEGMENT_TARGET_BYTES,
            arena_segment_records: memgraph::DEFAULT_ARENA_SEGMENT_RECORDS,
            bloom_bits_per_key: bloom::DEFAULT_BITS_PER_KEY,
            writer_threads: 8,
            background_threads: 2,
            auto_create_vertices: true,
            use_mlindex: true,
            fault: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.memgraph_bytes <= memgraph::BASE_OVERHEAD_BYTES {
            return fail("memgraph_bytes must exceed the fixed MemGraph overhead");
        }
        if self.level_factor < 2 {
            return fail("level_factor must be at least 2");
        }
        if self.max_levels == 0 || self.max_levels > MAX_OVERFLOW_POSITIONS + 1 {
            return fail("max_levels out of range");
        }
        if self.l0_limit == 0 {
            return fail("l0_limit must be positive");
        }
        if self.segment_target_bytes == 0 {
            return fail("segment_target_bytes must be positive");
        }
        if self.arena_segment_records == 0 {
            return fail("arena_segment_records must be positive");
        }
        if self.bloom_bits_per_key == 0 {
            return fail("bloom_bits_per_key must be positive");
        }
        Ok(())
    }

    fn levels(&self) -> LevelsConfig {
        LevelsConfig {
            l0_limit: self.l0_limit,
            level_factor: self.level_factor,
            max_levels: self.max_levels,
            base_bytes: self.memgraph_bytes as u64,
            segment_target_bytes: self.segment_target_bytes,
            bloom_bits_per_key: self.bloom_bits_per_key,
        }
    }
}

/// One visible out-edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbor {
    pub dst: VertexId,
    pub ts: Timestamp,
    pub prop: Bytes,
}

/// The sources a read of one vertex consults, in probe order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadPlan {
    pub memgraphs: Vec<u64>,
    /// Descending.
    pub l0: Vec<FileId>,
    pub positions: Vec<Position>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelStats {
    pub level: usize,
    pub files: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct EngineStats {
    pub io: IoCounters,
    pub writes: u64,
    pub write_latency_p50_ns: u64,
    pub write_latency_p99_ns: u64,
    pub levels: Vec<LevelStats>,
    pub flushes: u64,
    pub compactions: u64,
    pub live_versions: usize,
    pub index_page_reads: u64,
    pub memgraph_bytes: usize,
}

enum Run {
    Indexed { seg: Arc<Segment>, offset: u64, len: u64 },
    Lookup(Arc<Segment>),
}

impl Run {
    fn segment(&self) -> &Arc<Segment> {
        match self {
            Run::Indexed { seg, .. } | Run::Lookup(seg) => seg,
        }
    }

    fn bodies(&self, v: VertexId) -> Result<Vec<EdgeBody>> {
        match self {
            Run::Indexed { seg, offset, len } => seg.read_run(*offset, *len),
            Run::Lookup(seg) => seg.read_adjacency(v),
        }
    }
}

struct Sources {
    memgraphs: Vec<Arc<MemGraph>>,
    l0: Vec<Arc<Segment>>,
    runs: Vec<Run>,
    positions: Vec<Position>,
}

#[derive(Debug, Clone, Copy)]
enum PropRef {
    Mem(usize),
    Disk(usize, u64),
}

/// Newest body for `dst` with `ts <= tau` in a `(dst, ts)`-sorted run.
fn newest(bodies: &[EdgeBody], dst: VertexId, tau: Timestamp) -> Option<EdgeBody> {
    let hi = bodies.partition_point(|b| (b.dst, b.ts) <= (dst, tau));
    bodies[..hi].last().filter(|b| b.dst == dst).copied()
}

struct Inner {
    cfg: EngineConfig,
    levels_cfg: LevelsConfig,
    dir: PathBuf,
    io: Arc<IoStats>,
    clock: CommitClock,
    snapshots: Arc<SnapshotRegistry>,
    versions: VersionSet,
    index: MultiLevelIndex,
    registry: RwLock<HashMap<FileId, Arc<Segment>>>,
    manifest: Mutex<Manifest>,
    next_fid: AtomicU64,
    next_memgraph: AtomicU64,
    permits: Box<[Mutex<()>]>,
    vertices: VertexTable,
    rotation: Mutex<()>,
    flush_queue: Mutex<VecDeque<Arc<MemGraph>>>,
    flush_cv: Condvar,
    flush_lock: Mutex<()>,
    compaction: Mutex<()>,
    compaction_wanted: Mutex<bool>,
    compaction_cv: Condvar,
    background: bool,
    shutdown: AtomicBool,
    closed: AtomicBool,
    use_mlindex: AtomicBool,
    latency: Mutex<Histogram<u64>>,
    flushes: AtomicU64,
    compactions: AtomicU64,
    background_error: Mutex<Option<String>>,
}

pub struct Engine {
    inner: Arc<Inner>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("data_dir", &self.inner.dir)
            .finish_non_exhaustive()
    }
}

/// A compaction whose outputs are durable and in the manifest but whose index
/// updates are still being applied one vertex at a time.
pub struct PendingCompaction<'a> {
    inner: &'a Inner,
    _serial: MutexGuard<'a, ()>,
    job: CompactionJob,
    inputs: Vec<Arc<Segment>>,
    outputs: Vec<FileId>,
    removed: HashSet<FileId>,
    updates: VecDeque<(VertexId, Option<Position>, bool)>,
    done: bool,
}

impl PendingCompaction<'_> {
    pub fn job(&self) -> &CompactionJob {
        &self.job
    }

    pub fn output_fids(&self) -> &[FileId] {
        &self.outputs
    }

    pub fn remaining_vertices(&self) -> Vec<VertexId> {
        self.updates.iter().map(|u| u.0).collect()
    }

    /// Applies the index update of the next affected vertex (ascending ID order).
    pub fn apply_next_vertex(&mut self) -> Result<Option<VertexId>> {
        let Some((v, pos, from_l0)) = self.updates.pop_front() else {
            return Ok(None);
        };
        let removed = &self.removed;
        let min_fid = self.job.max_upper_l0_fid.map(|f| f + 1);
        self.inner.index.update(v, |loc| {
            loc.positions.retain(|p| !removed.contains(&p.fid));
            loc.positions.extend(pos);
            if let (true, Some(m)) = (from_l0, min_fid) {
                loc.min_l0_fid = loc.min_l0_fid.max(m);
            }
        })?;
        Ok(Some(v))
    }

    /// Applies any remaining index updates, publishes the new version and
    /// releases the inputs.
    pub fn finish(mut self) -> Result<()> {
        self.complete()
    }

    fn complete(&mut self) -> Result<()> {
        if self.done {
            return Ok(());
        }
        while self.apply_next_vertex()?.is_some() {}
        self.done = true;
        let inner = self.inner;
        let layout = inner.level_layout();
        let removed_l0 = if self.job.source_level == 0 {
            self.job.inputs_upper.clone()
        } else {
            Vec::new()
        };
        inner.versions.publish(VersionDelta::CompactionDone {
            removed_l0,
            levels: layout,
        });
        let mut reg = inner.registry.write();
        for s in &self.inputs {
            reg.remove(&s.fid());
            s.mark_obsolete();
        }
        inner.compactions.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }
}

impl Drop for PendingCompaction<'_> {
    fn drop(&mut self) {
        if let Err(e) = self.complete() {
            log::error!("finishing compaction failed: {e}");
        }
    }
}

impl Inner {
    fn check_open(&self) -> Result<()> {
        if self.closed.load(Ordering::Acquire) {
            Err(Error::Closed)
        } else {
            Ok(())
        }
    }

    fn permit(&self, v: VertexId) -> MutexGuard<'_, ()> {
        self.permits[(mix64(v) % WRITE_PERMITS as u64) as usize].lock()
    }

    fn ensure_vertex(&self, v: VertexId) -> Result<()> {
        if self.cfg.auto_create_vertices {
            self.vertices.ensure(v, self.clock.issued())?;
            Ok(())
        } else if self.vertices.is_live(v) {
            Ok(())
        } else {
            Err(Error::DeadVertex(v))
        }
    }

    fn write(&self, src: VertexId, dst: VertexId, prop: Bytes, tombstone: bool) -> Result<Timestamp> {
        loop {
            let mg = Arc::clone(self.versions.current().active());
            match mg.insert_with(src, dst, prop.clone(), tombstone, || self.clock.begin()) {
                Ok(ts) => {
                    self.clock.finish(ts);
                    return Ok(ts);
                }
                Err(MemGraphError::Full) if mg.is_empty() => {
                    return Err(Error::RecordTooLarge(prop.len()));
                }
                Err(_) => self.rotate(&mg)?,
            }
        }
    }

    /// Seals `full` and installs a fresh active MemGraph, unless someone already did.
    fn rotate(&self, full: &Arc<MemGraph>) -> Result<()> {
        let _r = self.rotation.lock();
        if self.versions.current().active().id() != full.id() {
            return Ok(());
        }
        self.wait_for_flush_backlog()?;
        full.seal();
        let id = self.next_memgraph.fetch_add(1, Ordering::Relaxed);
        let mg = Arc::new(MemGraph::new(
            id,
            self.cfg.memgraph_bytes,
            self.cfg.arena_segment_records,
        ));
        self.versions.publish(VersionDelta::AddMemGraph(mg));
        self.flush_queue.lock().push_back(Arc::clone(full));
        self.flush_cv.notify_all();
        Ok(())
    }

    fn wait_for_flush_backlog(&self) -> Result<()> {
        if !self.background {
            while self.flush_next()? {}
            return Ok(());
        }
        let mut q = self.flush_queue.lock();
        while !q.is_empty() {
            if self.shutdown.load(Ordering::Acquire) {
                drop(q);
                while self.flush_next()? {}
                return Ok(());
            }
            self.flush_cv.wait_for(&mut q, Duration::from_millis(100));
        }
        Ok(())
    }

    /// Flushes the oldest sealed MemGraph, if any.
    fn flush_next(&self) -> Result<bool> {
        let _f = self.flush_lock.lock();
        let Some(mg) = self.flush_queue.lock().front().cloned() else {
            return Ok(false);
        };
        self.flush_memgraph(&mg)?;
        self.flush_queue.lock().pop_front();
        self.flush_cv.notify_all();
        self.signal_compaction();
        Ok(true)
    }

    fn flush_memgraph(&self, mg: &Arc<MemGraph>) -> Result<()> {
        let skip_tombstones = self.cfg.fault == Some(FaultInjection::SkipTombstones);
        let mut built = None;
        if !mg.is_empty() {
            let fid = self.next_fid.fetch_add(1, Ordering::Relaxed);
            let mut b = SegmentBuilder::new(
                &self.dir,
                fid,
                Arc::clone(&self.io),
                self.cfg.bloom_bits_per_key,
            )?;
            for (src, r) in mg.drain_sorted()? {
                if !(skip_tombstones && r.tombstone) {
                    b.add_record(src, &r)?;
                }
            }
            if !b.is_empty() {
                built = Some(b.finish(mg.max_ts())?.segment);
            }
        }
        self.vertices.sync()?;
        if let Some(seg) = &built {
            let mut m = self.manifest.lock();
            m.add(0, seg.meta());
            m.next_fid = m.next_fid.max(self.next_fid.load(Ordering::Relaxed));
            if let Err(e) = m.store(&self.dir, &self.io) {
                m.remove(&[seg.fid()]);
                seg.mark_obsolete();
                return Err(e);
            }
            self.registry.write().insert(seg.fid(), Arc::clone(seg));
        }
        self.versions.publish(VersionDelta::FlushDone {
            memgraph: mg.id(),
            segment: built,
        });
        self.flushes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn signal_compaction(&self) {
        *self.compaction_wanted.lock() = true;
        self.compaction_cv.notify_all();
    }

    fn level_layout(&self) -> LevelLayout {
        let m = self.manifest.lock();
        let reg = self.registry.read();
        let mut out = vec![Vec::new(); m.levels.len()];
        for (level, segs) in m.levels.iter().enumerate().skip(1) {
            out[level] = segs
                .iter()
                .map(|s| Arc::clone(reg.get(&s.fid).expect("manifest names unregistered segment")))
                .collect();
        }
        Arc::new(out)
    }

    fn begin_compaction(&self) -> Result<Option<PendingCompaction<'_>>> {
        let serial = self.compaction.lock();
        let (job, drop_tombstones) = {
            let m = self.manifest.lock();
            let Some(job) = levels::pick_compaction(&m, &self.levels_cfg) else {
                return Ok(None);
            };
            let (mut lo, mut hi) = (job.min_src, job.max_src);
            for s in m.segments().map(|(_, s)| s) {
                if job.inputs().any(|f| f == s.fid) {
                    lo = lo.min(s.min_src);
                    hi = hi.max(s.max_src);
                }
            }
            let below = m.has_data_below(job.output_level(), lo, hi);
            (job, !below)
        };
        let inputs: Vec<Arc<Segment>> = {
            let reg = self.registry.read();
            job.inputs()
                .map(|f| Arc::clone(reg.get(&f).expect("manifest names unregistered segment")))
                .collect()
        };
        let params = MergeParams {
            dir: &self.dir,
            io: &self.io,
            bloom_bits_per_key: self.cfg.bloom_bits_per_key,
            target_bytes: self.cfg.segment_target_bytes,
            horizon: self.snapshots.horizon(&self.clock),
            drop_tombstones,
        };
        let outputs = levels::merge(&inputs, &params, &mut || {
            self.next_fid.fetch_add(1, Ordering::Relaxed)
        })?;

        let out_level = job.output_level();
        {
            let mut m = self.manifest.lock();
            let before = m.clone();
            let removed: Vec<FileId> = job.inputs().collect();
            m.remove(&removed);
            for o in &outputs {
                m.add(out_level, o.segment.meta());
            }
            m.next_fid = m.next_fid.max(self.next_fid.load(Ordering::Relaxed));
            if let Err(e) = m.validate().and_then(|_| m.store(&self.dir, &self.io)) {
                *m = before;
                for o in &outputs {
                    o.segment.mark_obsolete();
                }
                return Err(e);
            }
            let mut reg = self.registry.write();
            for o in &outputs {
                reg.insert(o.segment.fid(), Arc::clone(&o.segment));
            }
        }

        let mut affected: BTreeMap<VertexId, (Option<Position>, bool)> = BTreeMap::new();
        for s in &inputs {
            let from_l0 = job.source_level == 0 && job.inputs_upper.contains(&s.fid());
            for run in s.runs()? {
                affected.entry(run.src).or_default().1 |= from_l0;
            }
        }
        for o in &outputs {
            for run in &o.runs {
                affected.entry(run.src).or_default().0 = Some(Position {
                    level: out_level as u8,
                    fid: o.segment.fid(),
                    offset: run.offset,
                    len: run.len,
                });
            }
        }
        Ok(Some(PendingCompaction {
            inner: self,
            _serial: serial,
            removed: job.inputs().collect(),
            outputs: outputs.iter().map(|o| o.segment.fid()).collect(),
            updates: affected.into_iter().map(|(v, (p, l0))| (v, p, l0)).collect(),
            inputs,
            job,
            done: false,
        }))
    }

    fn compact_once(&self) -> Result<bool> {
        match self.begin_compaction()? {
            Some(p) => {
                p.finish()?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn resolve(&self, v: VertexId) -> Result<Sources> {
        let ver = self.versions.current();
        let memgraphs = ver.memgraphs.clone();
        if self.use_mlindex.load(Ordering::Relaxed) {
            self.index.with_location(v, |loc| {
                let l0 = ver
                    .l0
                    .iter()
                    .rev()
                    .filter(|s| s.fid() >= loc.min_l0_fid && s.covers(v))
                    .cloned()
                    .collect();
                let reg = self.registry.read();
                let runs = loc
                    .positions
                    .iter()
                    .map(|p| match reg.get(&p.fid) {
                        Some(seg) => Ok(Run::Indexed {
                            seg: Arc::clone(seg),
                            offset: p.offset,
                            len: p.len,
                        }),
                        None => Err(Error::Contract(format!(
                            "index names fid {} which is not registered",
                            p.fid
                        ))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Sources {
                    memgraphs,
                    l0,
                    runs,
                    positions: loc.positions.clone(),
                })
            })
        } else {
            let l0 = ver.l0.iter().rev().filter(|s| s.covers(v)).cloned().collect();
            let mut runs = Vec::new();
            for level in ver.levels.iter().skip(1) {
                let i = level.partition_point(|s| s.max_src() < v);
                if let Some(s) = level.get(i).filter(|s| s.covers(v)) {
                    runs.push(Run::Lookup(Arc::clone(s)));
                }
            }
            Ok(Sources {
                memgraphs,
                l0,
                runs,
                positions: Vec::new(),
            })
        }
    }

    fn neighbors(&self, v: VertexId, tau: Timestamp, with_props: bool) -> Result<Vec<Neighbor>> {
        let src = self.resolve(v)?;
        let mut mem_props = Vec::new();
        let mut recs: Vec<(VertexId, Timestamp, bool, PropRef)> = Vec::new();
        for mg in &src.memgraphs {
            for r in mg.records_upto(v, tau) {
                recs.push((r.dst, r.ts, r.tombstone, PropRef::Mem(mem_props.len())));
                mem_props.push(r.prop);
            }
        }
        let segs: Vec<&Arc<Segment>> = src
            .l0
            .iter()
            .chain(src.runs.iter().map(Run::segment))
            .collect();
        let mut push = |i: usize, bodies: Vec<EdgeBody>| {
            recs.extend(
                bodies
                    .into_iter()
                    .filter(|b| b.ts <= tau)
                    .map(|b| (b.dst, b.ts, b.tombstone, PropRef::Disk(i, b.prop_offset))),
            );
        };
        for (i, s) in src.l0.iter().enumerate() {
            push(i, s.read_adjacency(v)?);
        }
        for (i, r) in src.runs.iter().enumerate() {
            push(src.l0.len() + i, r.bodies(v)?);
        }

        recs.sort_unstable_by_key(|r| (r.0, r.1));
        let mut winners: Vec<(VertexId, Timestamp, PropRef)> = Vec::new();
        for g in recs.chunk_by(|a, b| a.0 == b.0) {
            let w = g[g.len() - 1];
            if !w.2 {
                winners.push((w.0, w.1, w.3));
            }
        }
        let mut cursors: Vec<_> = segs.iter().map(|s| s.prop_cursor()).collect();
        winners
            .into_iter()
            .map(|(dst, ts, p)| {
                let prop = match (with_props, p) {
                    (false, _) => Bytes::new(),
                    (true, PropRef::Mem(i)) => mem_props[i].clone(),
                    (true, PropRef::Disk(i, off)) => cursors[i].get(off)?,
                };
                Ok(Neighbor { dst, ts, prop })
            })
            .collect()
    }

    fn get(&self, src: VertexId, dst: VertexId, tau: Timestamp) -> Result<Option<Bytes>> {
        let s = self.resolve(src)?;
        for mg in &s.memgraphs {
            if let Some(r) = mg.get(src, dst, tau) {
                return Ok((!r.tombstone).then_some(r.prop));
            }
        }
        for seg in &s.l0 {
            if seg.maybe_contains(src, dst) {
                if let Some(b) = newest(&seg.read_adjacency(src)?, dst, tau) {
                    return Ok(if b.tombstone { None } else { Some(seg.read_property(b.prop_offset)?) });
                }
            }
        }
        for run in &s.runs {
            let seg = run.segment();
            if seg.maybe_contains(src, dst) {
                if let Some(b) = newest(&run.bodies(src)?, dst, tau) {
                    return Ok(if b.tombstone { None } else { Some(seg.read_property(b.prop_offset)?) });
                }
            }
        }
        Ok(None)
    }

    fn record_latency(&self, start: Instant) {
        let ns = start.elapsed().as_nanos().min(u64::MAX as u128) as u64;
        self.latency.lock().saturating_record(ns.max(1));
    }

    fn flush_worker(&self) {
        loop {
            {
                let mut q = self.flush_queue.lock();
                while q.is_empty() && !self.shutdown.load(Ordering::Acquire) {
                    self.flush_cv.wait(&mut q);
                }
                if q.is_empty() {
                    return;
                }
            }
            if let Err(e) = self.flush_next() {
                log::error!("flush failed, will retry: {e}");
                *self.background_error.lock() = Some(e.to_string());
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }

    fn compaction_worker(&self) {
        while !self.shutdown.load(Ordering::Acquire) {
            match self.compact_once() {
                Ok(true) => continue,
                Ok(false) => {
                    let mut w = self.compaction_wanted.lock();
                    if !*w {
                        self.compaction_cv.wait_for(&mut w, Duration::from_millis(50));
                    }
                    *w = false;
                }
                Err(e) => {
                    log::error!("compaction failed, will retry: {e}");
                    *self.background_error.lock() = Some(e.to_string());
                    std::thread::sleep(Duration::from_millis(100));
                }
            }
        }
    }
}

fn remove_orphans(dir: &Path, live: &HashSet<FileId>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let stem = name.split('.').next().unwrap_or("");
        let segment_file = name.ends_with(".edge") || name.ends_with(".prop") || name.ends_with(".tmp");
        let orphan = match stem.parse::<FileId>() {
            Ok(fid) => segment_file && (name.ends_with(".tmp") || !live.contains(&fid)),
            Err(_) => name.ends_with(".tmp"),
        };
        if orphan {
            log::info!("removing orphan file {}", path.display());
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}

impl Engine {
    /// Opens or creates the store in `cfg.data_dir` and rebuilds the index from
    /// the segments named by the manifest.
    pub fn open(cfg: EngineConfig) -> Result<Engine> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.data_dir)?;
        let dir = cfg.data_dir.clone();
        let io = Arc::new(IoStats::default());
        let manifest = Manifest::load(&dir, cfg.max_levels)?.unwrap_or_else(|| Manifest::new(cfg.max_levels));

        let mut registry = HashMap::new();
        let mut max_ts = 0;
        let mut vertex_bound = 0;
        for (_, meta) in manifest.segments() {
            let seg = Segment::open(&dir, meta.fid, Arc::clone(&io))?;
            let m = seg.meta();
            if (m.min_src, m.max_src, m.body_count) != (meta.min_src, meta.max_src, meta.body_count) {
                return Err(Error::CorruptManifest(format!(
                    "segment {} does not match its manifest record",
                    meta.fid
                )));
            }
            max_ts = max_ts.max(seg.creation_ts());
            vertex_bound = vertex_bound.max(m.max_src + 1);
            registry.insert(meta.fid, seg);
        }
        remove_orphans(&dir, &registry.keys().copied().collect())?;

        let vertices = VertexTable::open(&dir, Arc::clone(&io))?;
        vertices.raise_bound(vertex_bound);

        let index = MultiLevelIndex::default();
        let min_l0 = manifest.levels[0].first().map_or(0, |s| s.fid);
        for (level, meta) in manifest.segments().filter(|(l, _)| *l > 0) {
            let seg = &registry[&meta.fid];
            for run in seg.runs()? {
                index.update(run.src, |loc| {
                    loc.min_l0_fid = min_l0;
                    loc.positions.push(Position {
                        level: level as u8,
                        fid: meta.fid,
                        offset: run.offset,
                        len: run.len,
                    });
                })?;
            }
        }

        let mut layout = vec![Vec::new(); manifest.levels.len()];
        for (level, segs) in manifest.levels.iter().enumerate().skip(1) {
            layout[level] = segs.iter().map(|s| Arc::clone(&registry[&s.fid])).collect();
        }
        let l0 = manifest.levels[0].iter().map(|s| Arc::clone(&registry[&s.fid])).collect();
        let first_mg = Arc::new(MemGraph::new(1, cfg.memgraph_bytes, cfg.arena_segment_records));
        let versions = VersionSet::new(Version {
            id: 0,
            memgraphs: vec![first_mg],
            l0,
            levels: Arc::new(layout),
        });

        let inner = Arc::new(Inner {
            levels_cfg: cfg.levels(),
            dir,
            clock: CommitClock::new(max_ts),
            snapshots: Arc::new(SnapshotRegistry::default()),
            versions,
            index,
            registry: RwLock::new(registry),
            next_fid: AtomicU64::new(manifest.next_fid),
            manifest: Mutex::new(manifest),
            next_memgraph: AtomicU64::new(2),
            permits: (0..WRITE_PERMITS).map(|_| Mutex::new(())).collect(),
            vertices,
            rotation: Mutex::new(()),
            flush_queue: Mutex::new(VecDeque::new()),
            flush_cv: Condvar::new(),
            flush_lock: Mutex::new(()),
            compaction: Mutex::new(()),
            compaction_wanted: Mutex::new(true),
            compaction_cv: Condvar::new(),
            background: cfg.background_threads > 0,
            shutdown: AtomicBool::new(false),
            closed: AtomicBool::new(false),
            use_mlindex: AtomicBool::new(cfg.use_mlindex),
            latency: Mutex::new(Histogram::new(3).expect("valid histogram precision")),
            flushes: AtomicU64::new(0),
            compactions: AtomicU64::new(0),
            background_error: Mutex::new(None),
            io,
            cfg,
        });

        let mut threads = Vec::new();
        if inner.background {
            let f = Arc::clone(&inner);
            threads.push(
                std::thread::Builder::new()
                    .name("lsmgraph-flush".into())
                    .spawn(move || f.flush_worker())?,
            );
            let c = Arc::clone(&inner);
            threads.push(
                std::thread::Builder::new()
                    .name("lsmgraph-compact".into())
                    .spawn(move || c.compaction_worker())?,
            );
        }
        Ok(Engine {
            inner,
            threads: Mutex::new(threads),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.cfg
    }

    /// Inserts `src -> dst` with `prop` (empty for none) and returns its timestamp.
    pub fn insert_edge(&self, src: VertexId, dst: VertexId, prop: impl Into<Bytes>) -> Result<Timestamp> {
        let start = Instant::now();
        let inner = &self.inner;
        inner.check_open()?;
        inner.ensure_vertex(src)?;
        inner.ensure_vertex(dst)?;
        let ts = {
            let _p = inner.permit(src);
            inner.write(src, dst, prop.into(), false)?
        };
        inner.record_latency(start);
        Ok(ts)
    }

    /// Deletes `src -> dst` if it is currently visible; `NotFound` otherwise.
    pub fn delete_edge(&self, src: VertexId, dst: VertexId) -> Result<Timestamp> {
        let start = Instant::now();
        let inner = &self.inner;
        inner.check_open()?;
        let ts = {
            let _p = inner.permit(src);
            // the permit makes every earlier write to `src` complete, so reading
            // past the watermark sees exactly them
            if inner.get(src, dst, Timestamp::MAX)?.is_none() {
                return Err(Error::NotFound);
            }
            inner.write(src, dst, Bytes::new(), true)?
        };
        inner.record_latency(start);
        Ok(ts)
    }

    pub fn add_vertex(&self) -> Result<VertexId> {
        self.inner.check_open()?;
        self.inner.vertices.add(self.inner.clock.issued())
    }

    /// Deletes `v` and tombstones its visible out-edges. Its ID becomes reusable.
    pub fn delete_vertex(&self, v: VertexId) -> Result<()> {
        let inner = &self.inner;
        inner.check_open()?;
        if !inner.vertices.is_live(v) {
            return Err(Error::NotFound);
        }
        let _p = inner.permit(v);
        for n in inner.neighbors(v, Timestamp::MAX, false)? {
            inner.write(v, n.dst, Bytes::new(), true)?;
        }
        inner.vertices.delete(v, inner.clock.issued())
    }

    pub fn is_live(&self, v: VertexId) -> bool {
        self.inner.vertices.is_live(v)
    }

    pub fn live_at(&self, v: VertexId, snap: &Snapshot) -> bool {
        self.inner.vertices.live_at(v, snap.tau())
    }

    pub fn vertex_bound(&self) -> VertexId {
        self.inner.vertices.bound()
    }

    pub fn snapshot(&self) -> Snapshot {
        let tau = self.inner.snapshots.acquire(&self.inner.clock);
        Snapshot::new(
            Arc::clone(&self.inner.snapshots),
            tau,
            self.inner.vertices.bound(),
        )
    }

    /// Visible out-edges of `src` at the snapshot, with properties. Output is
    /// ascending by destination whether or not `ordered` is set.
    pub fn scan_neighbors(&self, src: VertexId, snap: &Snapshot, ordered: bool) -> Result<Vec<Neighbor>> {
        let _ = ordered;
        self.inner.neighbors(src, snap.tau(), true)
    }

    /// Visible destinations of `src` at the snapshot, ascending; skips property reads.
    pub fn scan_dsts(&self, src: VertexId, snap: &Snapshot) -> Result<Vec<VertexId>> {
        Ok(self
            .inner
            .neighbors(src, snap.tau(), false)?
            .into_iter()
            .map(|n| n.dst)
            .collect())
    }

    /// Property of the newest visible version of `src -> dst`, or `None`.
    pub fn get_edge(&self, src: VertexId, dst: VertexId, snap: &Snapshot) -> Result<Option<Bytes>> {
        self.inner.get(src, dst, snap.tau())
    }

    /// The sources a read of `v` would consult right now.
    pub fn read_plan(&self, v: VertexId) -> Result<ReadPlan> {
        let s = self.inner.resolve(v)?;
        Ok(ReadPlan {
            memgraphs: s.memgraphs.iter().map(|m| m.id()).collect(),
            l0: s.l0.iter().map(|x| x.fid()).collect(),
            positions: s.positions,
        })
    }

    pub fn set_use_mlindex(&self, on: bool) {
        self.inner.use_mlindex.store(on, Ordering::Relaxed);
    }

    pub fn use_mlindex(&self) -> bool {
        self.inner.use_mlindex.load(Ordering::Relaxed)
    }

    /// Seals the active MemGraph (if it has data) and flushes every sealed one.
    pub fn flush(&self) -> Result<()> {
        let inner = &self.inner;
        inner.check_open()?;
        let active = Arc::clone(inner.versions.current().active());
        if !active.is_empty() {
            inner.rotate(&active)?;
        }
        while inner.flush_next()? {}
        Ok(())
    }

    /// Runs one compaction job if any level is over budget.
    pub fn compact_once(&self) -> Result<bool> {
        self.inner.compact_once()
    }

    pub fn compact_until_idle(&self) -> Result<usize> {
        let mut n = 0;
        while self.inner.compact_once()? {
            n += 1;
        }
        Ok(n)
    }

    /// Starts a compaction and stops before its index updates, which the caller
    /// then applies with [`PendingCompaction::apply_next_vertex`].
    pub fn begin_compaction(&self) -> Result<Option<PendingCompaction<'_>>> {
        self.inner.begin_compaction()
    }

    /// Flushes sealed MemGraphs and compacts until every level is within budget.
    pub fn quiesce(&self) -> Result<()> {
        while self.inner.flush_next()? {}
        self.compact_until_idle()?;
        Ok(())
    }

    pub fn version(&self) -> Arc<Version> {
        self.inner.versions.current()
    }

    pub fn index(&self) -> &MultiLevelIndex {
        &self.inner.index
    }

    pub fn manifest(&self) -> Manifest {
        self.inner.manifest.lock().clone()
    }

    pub fn io_counters(&self) -> IoCounters {
        self.inner.io.counters()
    }

    /// Last error hit by a background thread, if any.
    pub fn background_error(&self) -> Option<String> {
        self.inner.background_error.lock().clone()
    }

    pub fn stats(&self) -> EngineStats {
        let inner = &self.inner;
        let (writes, p50, p99) = {
            let h = inner.latency.lock();
            if h.is_empty() {
                (0, 0, 0)
            } else {
                (h.len(), h.value_at_quantile(0.5), h.value_at_quantile(0.99))
            }
        };
        let levels = {
            let m = inner.manifest.lock();
            m.levels
                .iter()
                .enumerate()
                .map(|(level, segs)| LevelStats {
                    level,
                    files: segs.len(),
                    bytes: segs.iter().map(|s| s.bytes).sum(),
                })
                .collect()
        };
        EngineStats {
            io: inner.io.counters(),
            writes,
            write_latency_p50_ns: p50,
            write_latency_p99_ns: p99,
            levels,
            flushes: inner.flushes.load(Ordering::Relaxed),
            compactions: inner.compactions.load(Ordering::Relaxed),
            live_versions: inner.versions.live_versions(),
            index_page_reads: inner.index.page_reads(),
            memgraph_bytes: inner
                .versions
                .current()
                .memgraphs
                .iter()
                .map(|m| m.memory_usage())
                .sum(),
        }
    }

    /// Flushes all in-memory data, stops background threads and syncs the vertex log.
    pub fn close(&self) -> Result<()> {
        let inner = &self.inner;
        if inner.closed.load(Ordering::Acquire) {
            return Ok(());
        }
        let active = Arc::clone(inner.versions.current().active());
        if !active.is_empty() {
            inner.rotate(&active)?;
        }
        while inner.flush_next()? {}
        inner.closed.store(true, Ordering::Release);
        inner.shutdown.store(true, Ordering::Release);
        inner.flush_cv.notify_all();
        inner.signal_compaction();
        for t in self.threads.lock().drain(..) {
            let _ = t.join();
        }
        inner.vertices.sync()
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if let Err(e) = self.close() {
            log::error!("closing engine failed: {e}");
        }
    }
}
