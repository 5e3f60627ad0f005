//! Per-vertex index over the sorted levels (L1 and below).
//!
//! Every vertex has an [`IndexEntry`] behind its own reader-writer lock: the
//! smallest L0 fid a reader may still consult for it, one inline position, and a
//! third slot that holds either a second inline position or a reference into an
//! overflow page. When a vertex has more than two positions the bottom-most one
//! stays inline and the others move to the page that owns the vertex's ID interval.
//!
//! Pages are 4 KiB and hold log-style records `[v: u64][n: u8][n x position]`.
//! A page that runs out of room is compacted or split in half by vertex interval;
//! adjacent pages that both fall under a quarter full are merged. Every
//! restructure write-locks all vertices that have a record on the affected pages
//! before moving anything, so readers always see an entry and its page record
//! from the same moment.
//!
//! There is one writer at a time (compaction or rebuild); readers are unlimited.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockWriteGuard};

use crate::hash::VertexHashBuilder;
use crate::{Error, FileId, Result, VertexId};

pub const CHUNK_ENTRIES: usize = 1024;
pub const PAGE_SIZE: usize = 4096;
pub const DEFAULT_PAGE_INTERVAL: u64 = 1024;
const POSITION_BYTES: usize = 25;
const RECORD_HEADER: usize = 9;
const MERGE_FILL: usize = PAGE_SIZE / 4;
/// Positions that fit on one page in a single record.
pub const MAX_OVERFLOW_POSITIONS: usize = (PAGE_SIZE - RECORD_HEADER) / POSITION_BYTES;

/// Location of a vertex's edge run in one segment of a sorted level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub level: u8,
    pub fid: FileId,
    /// Index of the vertex's first edge body in the segment.
    pub offset: u64,
    /// Number of edge bodies in the run.
    pub len: u64,
}

impl Position {
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.level);
        out.extend_from_slice(&self.fid.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.len.to_le_bytes());
    }

    fn decode(b: &[u8]) -> Position {
        let u = |at: usize| u64::from_le_bytes(b[at..at + 8].try_into().unwrap());
        Position {
            level: b[0],
            fid: u(1),
            offset: u(9),
            len: u(17),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageRef {
    pub page_id: u32,
    pub offset_in_page: u16,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Slot3 {
    #[default]
    Empty,
    Position(Position),
    Page(PageRef),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IndexEntry {
    pub min_l0_fid: FileId,
    pub slot2: Option<Position>,
    pub slot3: Slot3,
}

/// Decoded view of an entry: positions ascending by level.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VertexLocation {
    pub min_l0_fid: FileId,
    pub positions: Vec<Position>,
}

struct Page {
    first: VertexId,
    last: VertexId,
    buf: Vec<u8>,
    live: BTreeMap<VertexId, u16>,
    dead: usize,
}

impl Page {
    fn new(first: VertexId, last: VertexId) -> Page {
        Page {
            first,
            last,
            buf: Vec::with_capacity(PAGE_SIZE),
            live: BTreeMap::new(),
            dead: 0,
        }
    }

    fn live_bytes(&self) -> usize {
        self.buf.len() - self.dead
    }

    fn record_len(&self, off: u16) -> usize {
        RECORD_HEADER + self.buf[off as usize + 8] as usize * POSITION_BYTES
    }

    fn read(&self, off: u16) -> (VertexId, Vec<Position>) {
        let at = off as usize;
        let v = u64::from_le_bytes(self.buf[at..at + 8].try_into().unwrap());
        let n = self.buf[at + 8] as usize;
        let body = &self.buf[at + RECORD_HEADER..at + RECORD_HEADER + n * POSITION_BYTES];
        (v, body.chunks_exact(POSITION_BYTES).map(Position::decode).collect())
    }

    fn kill(&mut self, v: VertexId) -> bool {
        match self.live.remove(&v) {
            Some(off) => {
                self.dead += self.record_len(off);
                true
            }
            None => false,
        }
    }

    fn try_append(&mut self, v: VertexId, ps: &[Position]) -> Option<u16> {
        let need = RECORD_HEADER + ps.len() * POSITION_BYTES;
        if self.buf.len() + need > PAGE_SIZE {
            return None;
        }
        self.kill(v);
        let off = self.buf.len() as u16;
        self.buf.extend_from_slice(&v.to_le_bytes());
        self.buf.push(ps.len() as u8);
        for p in ps {
            p.encode(&mut self.buf);
        }
        self.live.insert(v, off);
        Some(off)
    }

    fn records(&self) -> Vec<(VertexId, Vec<Position>)> {
        self.live.values().map(|&off| self.read(off)).collect()
    }
}

/// Overflow pages, each owning a contiguous vertex interval. Intervals with no
/// records have no page.
struct PageSet {
    interval: u64,
    pages: Vec<Option<Page>>,
    free_ids: Vec<u32>,
    by_first: BTreeMap<VertexId, u32>,
}

impl PageSet {
    fn new(interval: u64) -> PageSet {
        PageSet {
            interval: interval.max(1),
            pages: Vec::new(),
            free_ids: Vec::new(),
            by_first: BTreeMap::new(),
        }
    }

    fn page(&self, id: u32) -> &Page {
        self.pages[id as usize].as_ref().expect("dangling page id")
    }

    fn page_mut(&mut self, id: u32) -> &mut Page {
        self.pages[id as usize].as_mut().expect("dangling page id")
    }

    fn find(&self, v: VertexId) -> Option<u32> {
        let (_, &id) = self.by_first.range(..=v).next_back()?;
        (v <= self.page(id).last).then_some(id)
    }

    fn alloc(&mut self, page: Page) -> u32 {
        let id = match self.free_ids.pop() {
            Some(id) => {
                self.pages[id as usize] = Some(page);
                id
            }
            None => {
                self.pages.push(Some(page));
                (self.pages.len() - 1) as u32
            }
        };
        let first = self.page(id).first;
        self.by_first.insert(first, id);
        id
    }

    fn release(&mut self, id: u32) {
        let p = self.pages[id as usize].take().expect("dangling page id");
        self.by_first.remove(&p.first);
        self.free_ids.push(id);
    }

    /// Page whose interval holds `v`, created over the free part of `v`'s aligned block if absent.
    fn ensure(&mut self, v: VertexId) -> u32 {
        if let Some(id) = self.find(v) {
            return id;
        }
        let block_first = v - v % self.interval;
        let block_last = block_first.saturating_add(self.interval - 1);
        let first = match self.by_first.range(..v).next_back() {
            Some((_, &id)) => block_first.max(self.page(id).last + 1),
            None => block_first,
        };
        let last = match self.by_first.range(v..).next() {
            Some((&f, _)) => block_last.min(f - 1),
            None => block_last,
        };
        self.alloc(Page::new(first, last))
    }

    /// Lays `records` out over `[first, last]`, halving the interval until each part fits.
    fn place(
        &mut self,
        reuse: Option<u32>,
        first: VertexId,
        last: VertexId,
        records: &[(VertexId, Vec<Position>)],
        out: &mut Vec<(VertexId, PageRef)>,
    ) {
        let bytes: usize = records
            .iter()
            .map(|(_, ps)| RECORD_HEADER + ps.len() * POSITION_BYTES)
            .sum();
        if bytes <= PAGE_SIZE {
            if records.is_empty() {
                return;
            }
            let mut page = Page::new(first, last);
            let offs: Vec<u16> = records
                .iter()
                .map(|(v, ps)| page.try_append(*v, ps).unwrap())
                .collect();
            let id = match reuse {
                Some(id) => {
                    self.pages[id as usize] = Some(page);
                    self.by_first.insert(first, id);
                    id
                }
                None => self.alloc(page),
            };
            for ((v, _), off) in records.iter().zip(offs) {
                out.push((
                    *v,
                    PageRef {
                        page_id: id,
                        offset_in_page: off,
                    },
                ));
            }
            return;
        }
        assert!(first < last, "a single vertex record exceeds a page");
        let mid = first + (last - first) / 2;
        let split = records.partition_point(|(v, _)| *v <= mid);
        let (lo, hi) = records.split_at(split);
        let (reuse_lo, reuse_hi) = if lo.is_empty() { (None, reuse) } else { (reuse, None) };
        self.place(reuse_lo, first, mid, lo, out);
        self.place(reuse_hi, mid + 1, last, hi, out);
    }

    /// Rewrites page `id` (optionally replacing one vertex's record), splitting if needed.
    fn rebuild(&mut self, id: u32, replace: Option<(VertexId, &[Position])>) -> Vec<(VertexId, PageRef)> {
        let page = self.pages[id as usize].take().expect("dangling page id");
        self.by_first.remove(&page.first);
        let mut records = page.records();
        if let Some((v, ps)) = replace {
            records.retain(|(u, _)| *u != v);
            let at = records.partition_point(|(u, _)| *u < v);
            records.insert(at, (v, ps.to_vec()));
        }
        let mut out = Vec::new();
        self.place(Some(id), page.first, page.last, &records, &mut out);
        if !self.pages[id as usize].is_some() && !self.free_ids.contains(&id) {
            self.free_ids.push(id);
        }
        out
    }

    /// A contiguous neighbour of `id` such that both are under a quarter full.
    fn merge_partner(&self, id: u32) -> Option<(u32, u32)> {
        let p = self.page(id);
        if p.live_bytes() >= MERGE_FILL {
            return None;
        }
        let prev = self
            .by_first
            .range(..p.first)
            .next_back()
            .map(|(_, &q)| q)
            .filter(|&q| self.page(q).last + 1 == p.first);
        let next = self
            .by_first
            .range(p.first + 1..)
            .next()
            .map(|(_, &q)| q)
            .filter(|&q| p.last.checked_add(1) == Some(self.page(q).first));
        [prev.map(|q| (q, id)), next.map(|q| (id, q))]
            .into_iter()
            .flatten()
            .find(|&(a, b)| self.page(a).live_bytes() < MERGE_FILL && self.page(b).live_bytes() < MERGE_FILL)
    }

    fn merge(&mut self, a: u32, b: u32) -> Vec<(VertexId, PageRef)> {
        let pb = self.pages[b as usize].take().expect("dangling page id");
        self.by_first.remove(&pb.first);
        self.free_ids.push(b);
        let pa = self.pages[a as usize].take().expect("dangling page id");
        self.by_first.remove(&pa.first);
        let mut records = pa.records();
        records.extend(pb.records());
        records.sort_unstable_by_key(|r| r.0);
        let mut out = Vec::new();
        self.place(Some(a), pa.first, pb.last, &records, &mut out);
        out
    }
}

type Chunk = Box<[RwLock<IndexEntry>]>;

pub struct MultiLevelIndex {
    chunks: RwLock<HashMap<u64, Arc<Chunk>, VertexHashBuilder>>,
    pages: RwLock<PageSet>,
    writer: Mutex<()>,
    page_reads: AtomicU64,
}

impl Default for MultiLevelIndex {
    fn default() -> Self {
        Self::new(DEFAULT_PAGE_INTERVAL)
    }
}

impl MultiLevelIndex {
    pub fn new(page_interval: u64) -> Self {
        MultiLevelIndex {
            chunks: RwLock::new(HashMap::with_hasher(VertexHashBuilder)),
            pages: RwLock::new(PageSet::new(page_interval)),
            writer: Mutex::new(()),
            page_reads: AtomicU64::new(0),
        }
    }

    fn chunk(&self, v: VertexId) -> Option<Arc<Chunk>> {
        self.chunks
            .read()
            .get(&(v / CHUNK_ENTRIES as u64))
            .cloned()
    }

    fn chunk_or_create(&self, v: VertexId) -> Arc<Chunk> {
        if let Some(c) = self.chunk(v) {
            return c;
        }
        Arc::clone(
            self.chunks
                .write()
                .entry(v / CHUNK_ENTRIES as u64)
                .or_insert_with(|| {
                    Arc::new(
                        (0..CHUNK_ENTRIES)
                            .map(|_| RwLock::new(IndexEntry::default()))
                            .collect(),
                    )
                }),
        )
    }

    fn slot(v: VertexId) -> usize {
        (v % CHUNK_ENTRIES as u64) as usize
    }

    fn decode(&self, e: &IndexEntry, count: bool) -> VertexLocation {
        let mut positions = Vec::with_capacity(3);
        match e.slot3 {
            Slot3::Empty => positions.extend(e.slot2),
            Slot3::Position(p) => {
                positions.extend(e.slot2);
                positions.push(p);
            }
            Slot3::Page(r) => {
                if count {
                    self.page_reads.fetch_add(1, Ordering::Relaxed);
                }
                let pages = self.pages.read();
                positions.extend(pages.page(r.page_id).read(r.offset_in_page).1);
                positions.extend(e.slot2);
            }
        }
        VertexLocation {
            min_l0_fid: e.min_l0_fid,
            positions,
        }
    }

    /// Runs `f` on `v`'s location while holding `v`'s read lock.
    pub fn with_location<R>(&self, v: VertexId, f: impl FnOnce(&VertexLocation) -> R) -> R {
        match self.chunk(v) {
            Some(c) => {
                let g = c[Self::slot(v)].read();
                f(&self.decode(&g, true))
            }
            None => f(&VertexLocation::default()),
        }
    }

    pub fn get(&self, v: VertexId) -> VertexLocation {
        self.with_location(v, |l| l.clone())
    }

    /// Raw entry, for introspection.
    pub fn entry(&self, v: VertexId) -> IndexEntry {
        self.chunk(v)
            .map(|c| *c[Self::slot(v)].read())
            .unwrap_or_default()
    }

    pub fn page_reads(&self) -> u64 {
        self.page_reads.load(Ordering::Relaxed)
    }

    pub fn page_count(&self) -> usize {
        self.pages.read().by_first.len()
    }

    /// `(first, last)` vertex interval of every page, ascending.
    pub fn page_intervals(&self) -> Vec<(VertexId, VertexId)> {
        let pages = self.pages.read();
        pages
            .by_first
            .values()
            .map(|&id| (pages.page(id).first, pages.page(id).last))
            .collect()
    }

    /// Applies `f` to `v`'s location and stores the result atomically with respect
    /// to readers of `v`. Positions must name distinct levels.
    pub fn update(&self, v: VertexId, f: impl FnOnce(&mut VertexLocation)) -> Result<()> {
        let _w = self.writer.lock();
        let chunk = self.chunk_or_create(v);
        let mut g = chunk[Self::slot(v)].write();
        let mut loc = self.decode(&g, false);
        f(&mut loc);
        loc.positions.sort_unstable_by_key(|p| p.level);
        if loc.positions.windows(2).any(|w| w[0].level == w[1].level) {
            return Err(Error::Contract(format!(
                "vertex {v} given two positions on one level: {:?}",
                loc.positions
            )));
        }
        if loc.positions.len() > MAX_OVERFLOW_POSITIONS + 1 {
            return Err(Error::Contract(format!("vertex {v} spans too many levels")));
        }
        let had_page = matches!(g.slot3, Slot3::Page(_));
        g.min_l0_fid = loc.min_l0_fid;

        if loc.positions.len() <= 2 {
            g.slot2 = loc.positions.first().copied();
            g.slot3 = loc.positions.get(1).map_or(Slot3::Empty, |&p| Slot3::Position(p));
            drop(g);
            if had_page {
                let id = {
                    let mut pages = self.pages.write();
                    let id = pages.find(v).expect("paged vertex without a page");
                    pages.page_mut(id).kill(v);
                    id
                };
                self.shrink(id);
            }
            return Ok(());
        }

        let (overflow, bottom) = loc.positions.split_at(loc.positions.len() - 1);
        let appended = {
            let mut pages = self.pages.write();
            let id = pages.ensure(v);
            pages.page_mut(id).try_append(v, overflow).map(|off| PageRef {
                page_id: id,
                offset_in_page: off,
            })
        };
        g.slot2 = Some(bottom[0]);
        match appended {
            Some(r) => g.slot3 = Slot3::Page(r),
            None => {
                let id = self.pages.read().find(v).unwrap();
                self.restructure(&[id], Some((v, &mut g, overflow)));
            }
        }
        Ok(())
    }

    /// Rebuilds the pages in `ids` (one page, or two adjacent ones to merge),
    /// holding write locks on every vertex stored on them.
    fn restructure(
        &self,
        ids: &[u32],
        mut held: Option<(VertexId, &mut RwLockWriteGuard<'_, IndexEntry>, &[Position])>,
    ) {
        let held_v = held.as_ref().map(|h| h.0);
        let others: Vec<VertexId> = {
            let pages = self.pages.read();
            ids.iter()
                .flat_map(|&id| pages.page(id).live.keys().copied())
                .filter(|&u| Some(u) != held_v)
                .collect()
        };
        let chunks: Vec<Arc<Chunk>> = others.iter().map(|&u| self.chunk_or_create(u)).collect();
        let mut guards: HashMap<VertexId, RwLockWriteGuard<'_, IndexEntry>> = others
            .iter()
            .zip(&chunks)
            .map(|(&u, c)| (u, c[Self::slot(u)].write()))
            .collect();
        let refs = {
            let mut pages = self.pages.write();
            match ids {
                [id] => pages.rebuild(*id, held.as_ref().map(|h| (h.0, h.2))),
                [a, b] => pages.merge(*a, *b),
                _ => unreachable!(),
            }
        };
        for (u, r) in refs {
            if Some(u) == held_v {
                held.as_mut().unwrap().1.slot3 = Slot3::Page(r);
            } else {
                guards.get_mut(&u).expect("vertex not locked").slot3 = Slot3::Page(r);
            }
        }
    }

    /// After a record was removed from page `id`: drop it if empty, else merge
    /// with a neighbour when both are under a quarter full.
    fn shrink(&self, id: u32) {
        {
            let mut pages = self.pages.write();
            if pages.page(id).live.is_empty() {
                pages.release(id);
                return;
            }
        }
        let partner = self.pages.read().merge_partner(id);
        if let Some((a, b)) = partner {
            self.restructure(&[a, b], None);
        }
    }

    /// Cross-checks entries against pages. Test helper.
    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        let pages = self.pages.read();
        let mut paged = 0;
        for chunk in self.chunks.read().values() {
            for e in chunk.iter() {
                let e = e.read();
                if let Slot3::Page(r) = e.slot3 {
                    paged += 1;
                    let p = pages.page(r.page_id);
                    let (v, ps) = p.read(r.offset_in_page);
                    if p.live.get(&v) != Some(&r.offset_in_page) || !(p.first..=p.last).contains(&v) {
                        return Err(format!("vertex {v}: stale page ref {r:?}"));
                    }
                    if ps.len() < 2 {
                        return Err(format!("vertex {v}: page record with {} positions", ps.len()));
                    }
                }
            }
        }
        let live: usize = pages.by_first.values().map(|&id| pages.page(id).live.len()).sum();
        if live != paged {
            return Err(format!("{live} page records but {paged} paged entries"));
        }
        let iv: Vec<_> = pages
            .by_first
            .values()
            .map(|&id| (pages.page(id).first, pages.page(id).last))
            .collect();
        if iv.windows(2).any(|w| w[0].1 >= w[1].0) {
            return Err("page intervals overlap".into());
        }
        Ok(())
    }
}
