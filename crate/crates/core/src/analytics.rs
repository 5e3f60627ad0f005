//! BFS, SSSP, connected components and full scans over a pinned snapshot.
//!
//! Every algorithm reads only through the engine's snapshot API, so running it
//! twice on the same [`Snapshot`] gives identical results no matter what
//! writers and compactions do in between.

use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::engine::Engine;
use crate::hash::mix64;
use crate::io::IoCounters;
use crate::version::Snapshot;
use crate::{Error, Result, VertexId};

/// Level of a vertex BFS never reached.
pub const UNVISITED: u64 = u64::MAX;
/// Label of a vertex that does not exist at the snapshot.
pub const NO_COMPONENT: VertexId = u64::MAX;

const SCAN_CHUNK: u64 = 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    /// Hop counts; [`UNVISITED`] for unreached vertices.
    Levels(Vec<u64>),
    /// Shortest distances; infinity for unreached vertices.
    Distances(Vec<f64>),
    /// Smallest vertex ID of the weakly connected component; [`NO_COMPONENT`] for absent vertices.
    Labels(Vec<VertexId>),
    /// Aggregate-only results.
    None,
}

impl Values {
    pub fn len(&self) -> usize {
        match self {
            Values::Levels(v) => v.len(),
            Values::Distances(v) => v.len(),
            Values::Labels(v) => v.len(),
            Values::None => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn checksum(&self) -> u64 {
        fn fold(it: impl Iterator<Item = u64>) -> u64 {
            it.enumerate()
                .fold(0u64, |acc, (i, x)| acc.wrapping_add(mix64(i as u64 ^ mix64(x))))
        }
        match self {
            Values::Levels(v) | Values::Labels(v) => fold(v.iter().copied()),
            Values::Distances(v) => fold(v.iter().map(|d| d.to_bits())),
            Values::None => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub values: Values,
    /// Vertices reached (BFS, SSSP), present (CC) or scanned (SCAN).
    pub visited: u64,
    /// Edges traversed.
    pub edges: u64,
    /// Deterministic digest of the result for a given snapshot.
    pub checksum: u64,
    pub elapsed: Duration,
    pub io: IoCounters,
}

struct Run<'a> {
    engine: &'a Engine,
    start: Instant,
    io: IoCounters,
}

impl<'a> Run<'a> {
    fn start(engine: &'a Engine) -> Self {
        Run {
            engine,
            start: Instant::now(),
            io: engine.io_counters(),
        }
    }

    fn finish(self, values: Values, visited: u64, edges: u64, checksum: Option<u64>) -> AnalysisResult {
        AnalysisResult {
            checksum: checksum.unwrap_or_else(|| values.checksum()),
            values,
            visited,
            edges,
            elapsed: self.start.elapsed(),
            io: self.engine.io_counters() - self.io,
        }
    }
}

fn check_source(engine: &Engine, snap: &Snapshot, src: VertexId) -> Result<()> {
    if src < snap.vertex_bound() && engine.live_at(src, snap) {
        Ok(())
    } else {
        Err(Error::DeadVertex(src))
    }
}

fn grow<T: Clone>(v: &mut Vec<T>, idx: VertexId, fill: T) {
    if idx as usize >= v.len() {
        v.resize(idx as usize + 1, fill);
    }
}

/// Decodes an edge weight: 8 little-endian bytes of `f64`, or 1.0 when absent.
pub fn edge_weight(src: VertexId, dst: VertexId, prop: &[u8]) -> Result<f64> {
    match prop.len() {
        0 => Ok(1.0),
        8 => {
            let w = f64::from_le_bytes(prop.try_into().unwrap());
            if w.is_nan() || w < 0.0 {
                Err(Error::NegativeWeight { src, dst, weight: w })
            } else {
                Ok(w)
            }
        }
        len => Err(Error::InvalidWeight { src, dst, len }),
    }
}

/// Level-synchronous BFS; each frontier is scanned in parallel.
pub fn bfs(engine: &Engine, snap: &Snapshot, src: VertexId) -> Result<AnalysisResult> {
    check_source(engine, snap, src)?;
    let run = Run::start(engine);
    let mut level = vec![UNVISITED; snap.vertex_bound() as usize];
    level[src as usize] = 0;
    let mut frontier = vec![src];
    let (mut visited, mut edges) = (1u64, 0u64);
    let mut depth = 0;
    while !frontier.is_empty() {
        depth += 1;
        let adj: Vec<Vec<VertexId>> = frontier
            .par_iter()
            .map(|&v| engine.scan_dsts(v, snap))
            .collect::<Result<_>>()?;
        let mut next = Vec::new();
        for d in adj.into_iter().flatten() {
            edges += 1;
            grow(&mut level, d, UNVISITED);
            if level[d as usize] == UNVISITED {
                level[d as usize] = depth;
                visited += 1;
                next.push(d);
            }
        }
        frontier = next;
    }
    Ok(run.finish(Values::Levels(level), visited, edges, None))
}

#[derive(PartialEq)]
struct Entry(f64, VertexId);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra with a binary heap. Weights come from [`edge_weight`].
pub fn sssp(engine: &Engine, snap: &Snapshot, src: VertexId) -> Result<AnalysisResult> {
    check_source(engine, snap, src)?;
    let run = Run::start(engine);
    let mut dist = vec![f64::INFINITY; snap.vertex_bound() as usize];
    let mut done = vec![false; dist.len()];
    dist[src as usize] = 0.0;
    let mut heap = BinaryHeap::from([Entry(0.0, src)]);
    let (mut visited, mut edges) = (0u64, 0u64);
    while let Some(Entry(d, v)) = heap.pop() {
        if done[v as usize] {
            continue;
        }
        done[v as usize] = true;
        visited += 1;
        for n in engine.scan_neighbors(v, snap, true)? {
            edges += 1;
            let nd = d + edge_weight(v, n.dst, &n.prop)?;
            grow(&mut dist, n.dst, f64::INFINITY);
            grow(&mut done, n.dst, false);
            if nd < dist[n.dst as usize] {
                dist[n.dst as usize] = nd;
                heap.push(Entry(nd, n.dst));
            }
        }
    }
    Ok(run.finish(Values::Distances(dist), visited, edges, None))
}

/// Visible adjacency of every vertex ID below the snapshot bound, in parallel chunks.
fn for_each_chunk<T: Send>(
    engine: &Engine,
    snap: &Snapshot,
    f: impl Fn(VertexId, Vec<VertexId>, &mut T) + Sync,
    init: impl Fn() -> T + Sync,
) -> Result<Vec<T>> {
    let bound = snap.vertex_bound();
    let chunks = bound.div_ceil(SCAN_CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for v in c * SCAN_CHUNK..((c + 1) * SCAN_CHUNK).min(bound) {
                f(v, engine.scan_dsts(v, snap)?, &mut acc);
            }
            Ok(acc)
        })
        .collect()
}

fn find(parent: &mut [VertexId], mut v: VertexId) -> VertexId {
    while parent[v as usize] != v {
        let p = parent[v as usize];
        parent[v as usize] = parent[p as usize];
        v = p;
    }
    v
}

/// Weakly connected components by union-find over out-edges.
pub fn cc(engine: &Engine, snap: &Snapshot) -> Result<AnalysisResult> {
    let run = Run::start(engine);
    let bound = snap.vertex_bound();
    let mut present: Vec<bool> = (0..bound).map(|v| engine.live_at(v, snap)).collect();
    let edge_lists = for_each_chunk(
        engine,
        snap,
        |v, dsts, acc: &mut Vec<(VertexId, VertexId)>| acc.extend(dsts.into_iter().map(|d| (v, d))),
        Vec::new,
    )?;
    let mut parent: Vec<VertexId> = (0..bound).collect();
    let mut edges = 0u64;
    for (a, b) in edge_lists.into_iter().flatten() {
        edges += 1;
        for x in [a, b] {
            if x as usize >= parent.len() {
                let from = parent.len() as u64;
                parent.extend(from..=x);
            }
            grow(&mut present, x, false);
            present[x as usize] = true;
        }
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        // the smaller root wins so every label is the component's minimum ID
        match ra.cmp(&rb) {
            CmpOrdering::Less => parent[rb as usize] = ra,
            CmpOrdering::Greater => parent[ra as usize] = rb,
            CmpOrdering::Equal => {}
        }
    }
    let mut labels = vec![NO_COMPONENT; parent.len()];
    let mut visited = 0;
    for v in 0..parent.len() as u64 {
        if present[v as usize] {
            labels[v as usize] = find(&mut parent, v);
            visited += 1;
        }
    }
    Ok(run.finish(Values::Labels(labels), visited, edges, None))
}

/// Number of distinct components in a [`cc`] result.
pub fn component_count(labels: &[VertexId]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(v, &l)| l == v as VertexId)
        .count()
}

/// Order-independent digest of one edge.
pub fn edge_digest(src: VertexId, dst: VertexId) -> u64 {
    mix64(src ^ mix64(dst))
}

/// Reads every vertex's visible adjacency once. The checksum is the wrapping sum
/// of [`edge_digest`] over all visible edges.
pub fn scan_all(engine: &Engine, snap: &Snapshot) -> Result<AnalysisResult> {
    let run = Run::start(engine);
    let parts = for_each_chunk(
        engine,
        snap,
        |v, dsts, acc: &mut (u64, u64)| {
            acc.0 += dsts.len() as u64;
            for d in dsts {
                acc.1 = acc.1.wrapping_add(edge_digest(v, d));
            }
        },
        || (0u64, 0u64),
    )?;
    let (edges, sum) = parts
        .into_iter()
        .fold((0, 0u64), |(e, s), (pe, ps)| (e + pe, s.wrapping_add(ps)));
    Ok(run.finish(Values::None, snap.vertex_bound(), edges, Some(sum)))
}
