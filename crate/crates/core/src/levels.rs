//! Level layout, the MANIFEST file, compaction picking and the vertex-aware merge.
//!
//! L0 holds one segment per flushed MemGraph; ranges may overlap. Each level
//! `Li` for `1 <= i <= max_levels` holds one logical CSR split into segments with
//! pairwise disjoint source ranges, and all records of one vertex sit in a single
//! segment of that level.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::io::IoStats;
use crate::segment::{self, BuiltSegment, EdgeBody, Segment, SegmentBuilder, SegmentMeta};
use crate::{Error, FileId, Result, Timestamp, VertexId};

pub const MANIFEST_FILE: &str = "MANIFEST";
pub const DEFAULT_L0_LIMIT: usize = 4;
pub const DEFAULT_LEVEL_FACTOR: u64 = 10;
pub const DEFAULT_MAX_LEVELS: usize = 5;
pub const DEFAULT_SEGMENT_TARGET_BYTES: u64 = 8 << 20;

#[derive(Debug, Clone)]
pub struct LevelsConfig {
    pub l0_limit: usize,
    pub level_factor: u64,
    /// Number of sorted levels below L0.
    pub max_levels: usize,
    /// Capacity unit `P`: level `i` holds up to `P * T^i` bytes.
    pub base_bytes: u64,
    pub segment_target_bytes: u64,
    pub bloom_bits_per_key: usize,
}

impl LevelsConfig {
    pub fn capacity(&self, level: usize) -> u64 {
        let mut c = self.base_bytes;
        for _ in 0..level {
            c = c.saturating_mul(self.level_factor);
        }
        c
    }
}

/// Segment metadata per level plus the fid high-water mark, mirrored in `MANIFEST`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    /// `levels[0]` ascending by fid; deeper levels ascending by `min_src`.
    pub levels: Vec<Vec<SegmentMeta>>,
    pub next_fid: FileId,
}

impl Manifest {
    pub fn new(max_levels: usize) -> Self {
        Manifest {
            levels: vec![Vec::new(); max_levels + 1],
            next_fid: 1,
        }
    }

    pub fn max_levels(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn encode(&self) -> String {
        let mut s = String::new();
        for (level, segs) in self.levels.iter().enumerate() {
            for m in segs {
                let _ = writeln!(
                    s,
                    "{level} {} {} {} {} {}",
                    m.fid, m.min_src, m.max_src, m.body_count, m.bytes
                );
            }
        }
        let _ = writeln!(s, "next_fid {}", self.next_fid);
        s
    }

    pub fn decode(text: &str, max_levels: usize) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::CorruptManifest(format!("line {line}: {why}"));
        let mut m = Manifest::new(max_levels);
        let mut next_fid = None;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => {}
                ["next_fid", v] => {
                    next_fid = Some(v.parse().map_err(|_| bad(n, "bad next_fid"))?);
                }
                [level, rest @ ..] if rest.len() == 5 => {
                    let level: usize = level.parse().map_err(|_| bad(n, "bad level"))?;
                    let nums = rest
                        .iter()
                        .map(|f| f.parse::<u64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(n, "bad number"))?;
                    if level > max_levels {
                        return Err(Error::Config(format!(
                            "store has level {level} but max_levels is {max_levels}"
                        )));
                    }
                    m.levels[level].push(SegmentMeta {
                        fid: nums[0],
                        min_src: nums[1],
                        max_src: nums[2],
                        body_count: nums[3],
                        bytes: nums[4],
                    });
                }
                _ => return Err(bad(n, "unrecognized record")),
            }
        }
        m.next_fid = next_fid.ok_or_else(|| Error::CorruptManifest("missing next_fid".into()))?;
        m.levels[0].sort_by_key(|s| s.fid);
        for l in &mut m.levels[1..] {
            l.sort_by_key(|s| s.min_src);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(dir: &Path, max_levels: usize) -> Result<Option<Self>> {
        match fs::read_to_string(dir.join(MANIFEST_FILE)) {
            Ok(text) => Manifest::decode(&text, max_levels).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Atomically replaces `MANIFEST` (temp file, fsync, rename, directory fsync).
    pub fn store(&self, dir: &Path, io: &IoStats) -> Result<()> {
        let text = self.encode();
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
        }
        io.record_write(text.len() as u64);
        fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        segment::sync_dir(dir)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut fids = std::collections::HashSet::new();
        for (level, segs) in self.levels.iter().enumerate() {
            for m in segs {
                if m.min_src > m.max_src || m.body_count == 0 {
                    return Err(Error::CorruptManifest(format!("segment {} is malformed", m.fid)));
                }
                if !fids.insert(m.fid) {
                    return Err(Error::CorruptManifest(format!("fid {} listed twice", m.fid)));
                }
                if m.fid >= self.next_fid {
                    return Err(Error::CorruptManifest(format!(
                        "fid {} not below next_fid {}",
                        m.fid, self.next_fid
                    )));
                }
            }
            if level > 0 && segs.windows(2).any(|w| w[0].max_src >= w[1].min_src) {
                return Err(Error::CorruptManifest(format!(
                    "level {level} segments overlap"
                )));
            }
        }
        Ok(())
    }

    pub fn level_bytes(&self, level: usize) -> u64 {
        self.levels[level].iter().map(|m| m.bytes).sum()
    }

    pub fn segments(&self) -> impl Iterator<Item = (usize, &SegmentMeta)> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(l, segs)| segs.iter().map(move |m| (l, m)))
    }

    pub fn add(&mut self, level: usize, meta: SegmentMeta) {
        let segs = &mut self.levels[level];
        let key = |m: &SegmentMeta| if level == 0 { m.fid } else { m.min_src };
        let at = segs.partition_point(|m| key(m) < key(&meta));
        segs.insert(at, meta);
        self.next_fid = self.next_fid.max(meta.fid + 1);
    }

    pub fn remove(&mut self, fids: &[FileId]) {
        for segs in &mut self.levels {
            segs.retain(|m| !fids.contains(&m.fid));
        }
    }

    /// True when some level below `level` has a segment intersecting `[lo, hi]`.
    pub fn has_data_below(&self, level: usize, lo: VertexId, hi: VertexId) -> bool {
        self.levels[level + 1..]
            .iter()
            .flatten()
            .any(|m| m.overlaps(lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactionJob {
    pub source_level: usize,
    pub inputs_upper: Vec<FileId>,
    pub inputs_lower: Vec<FileId>,
    /// Largest L0 fid among the inputs, for L0 jobs only.
    pub max_upper_l0_fid: Option<FileId>,
    pub min_src: VertexId,
    pub max_src: VertexId,
}

impl CompactionJob {
    pub fn output_level(&self) -> usize {
        self.source_level + 1
    }

    pub fn inputs(&self) -> impl Iterator<Item = FileId> + '_ {
        self.inputs_upper.iter().chain(&self.inputs_lower).copied()
    }
}

/// Chooses the next compaction, or `None` when every level is within budget.
///
/// L0 is compacted once it holds `l0_limit` files: the oldest file together with
/// every L0 file connected to it through range overlap. Otherwise the shallowest
/// sorted level above its capacity gives up its first segment in range order.
/// Either way all intersecting segments of the next level join the job.
pub fn pick_compaction(m: &Manifest, cfg: &LevelsConfig) -> Option<CompactionJob> {
    let l0 = &m.levels[0];
    if cfg.max_levels >= 1 && !l0.is_empty() && l0.len() >= cfg.l0_limit {
        let oldest = l0.iter().min_by_key(|s| s.fid).unwrap();
        let (mut lo, mut hi) = (oldest.min_src, oldest.max_src);
        let mut picked = vec![false; l0.len()];
        loop {
            let mut grew = false;
            for (i, s) in l0.iter().enumerate() {
                if !picked[i] && s.overlaps(lo, hi) {
                    picked[i] = true;
                    lo = lo.min(s.min_src);
                    hi = hi.max(s.max_src);
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        let upper: Vec<FileId> = l0
            .iter()
            .zip(&picked)
            .filter(|(_, &p)| p)
            .map(|(s, _)| s.fid)
            .collect();
        return Some(CompactionJob {
            source_level: 0,
            max_upper_l0_fid: upper.iter().copied().max(),
            inputs_upper: upper,
            inputs_lower: overlapping(&m.levels[1], lo, hi),
            min_src: lo,
            max_src: hi,
        });
    }
    for level in 1..cfg.max_levels {
        if m.level_bytes(level) > cfg.capacity(level) {
            let s = m.levels[level][0];
            return Some(CompactionJob {
                source_level: level,
                inputs_upper: vec![s.fid],
                inputs_lower: overlapping(&m.levels[level + 1], s.min_src, s.max_src),
                max_upper_l0_fid: None,
                min_src: s.min_src,
                max_src: s.max_src,
            });
        }
    }
    None
}

fn overlapping(level: &[SegmentMeta], lo: VertexId, hi: VertexId) -> Vec<FileId> {
    level
        .iter()
        .filter(|s| s.overlaps(lo, hi))
        .map(|s| s.fid)
        .collect()
}

pub struct MergeParams<'a> {
    pub dir: &'a Path,
    pub io: &'a Arc<IoStats>,
    pub bloom_bits_per_key: usize,
    pub target_bytes: u64,
    /// Oldest timestamp any reader may still ask for.
    pub horizon: Timestamp,
    /// Whether a tombstone that is the oldest retained version may be dropped.
    pub drop_tombstones: bool,
}

struct Pending {
    dst: VertexId,
    ts: Timestamp,
    input: usize,
    body: EdgeBody,
}

/// Applies version retention to one `(src, dst)` group sorted by ts: keep the
/// newest record at or below the horizon and everything newer.
fn retain_versions(group: &[Pending], horizon: Timestamp, drop_tombstones: bool) -> &[Pending] {
    let base = group.iter().rposition(|p| p.ts <= horizon);
    match base {
        None => group,
        Some(b) if drop_tombstones && group[b].body.tombstone => &group[b + 1..],
        Some(b) => &group[b..],
    }
}

/// k-way merge of `inputs` into new segments ordered by `(src, dst, ts)`.
///
/// Output is cut only at vertex boundaries: a new segment starts when adding the
/// next vertex would push a non-empty output past `target_bytes`, so a vertex
/// larger than the target ends up alone in its own segment.
/// On error every output built so far is deleted.
pub fn merge(
    inputs: &[Arc<Segment>],
    params: &MergeParams<'_>,
    next_fid: &mut dyn FnMut() -> FileId,
) -> Result<Vec<BuiltSegment>> {
    let mut outputs = Vec::new();
    match merge_into(inputs, params, next_fid, &mut outputs) {
        Ok(()) => Ok(outputs),
        Err(e) => {
            for o in &outputs {
                o.segment.mark_obsolete();
            }
            Err(e)
        }
    }
}

fn merge_into(
    inputs: &[Arc<Segment>],
    params: &MergeParams<'_>,
    next_fid: &mut dyn FnMut() -> FileId,
    outputs: &mut Vec<BuiltSegment>,
) -> Result<()> {
    let creation_ts = inputs.iter().map(|s| s.creation_ts()).max().unwrap_or(0);
    let mut iters = inputs
        .iter()
        .map(|s| s.iter())
        .collect::<Result<Vec<_>>>()?;
    let mut cursors: Vec<_> = inputs.iter().map(|s| s.prop_cursor()).collect();
    let mut heads: Vec<Option<(VertexId, EdgeBody)>> = Vec::with_capacity(inputs.len());
    let mut heap = BinaryHeap::new();
    for (i, it) in iters.iter_mut().enumerate() {
        let head = it.next().transpose()?;
        if let Some((src, b)) = head {
            heap.push(Reverse((src, b.dst, b.ts, i)));
        }
        heads.push(head);
    }

    let mut builder: Option<SegmentBuilder> = None;
    let mut vertex: Vec<Pending> = Vec::new();
    let mut kept: Vec<(Pending, bytes::Bytes)> = Vec::new();

    while let Some(&Reverse((src, ..))) = heap.peek() {
        vertex.clear();
        while let Some(&Reverse((s, dst, ts, i))) = heap.peek() {
            if s != src {
                break;
            }
            heap.pop();
            let (_, body) = heads[i].take().unwrap();
            vertex.push(Pending {
                dst,
                ts,
                input: i,
                body,
            });
            let next = iters[i].next().transpose()?;
            if let Some((s2, b)) = next {
                if (s2, b.dst, b.ts) <= (s, dst, ts) {
                    return Err(Error::corrupt(inputs[i].fid(), "records out of order"));
                }
                heap.push(Reverse((s2, b.dst, b.ts, i)));
            }
            heads[i] = next;
        }

        kept.clear();
        let mut size = segment::OFFSET_ENTRY_LEN;
        for group in vertex.chunk_by(|a, b| a.dst == b.dst) {
            for p in retain_versions(group, params.horizon, params.drop_tombstones) {
                let prop = cursors[p.input].get(p.body.prop_offset)?;
                size += segment::EDGE_BODY_LEN;
                if !prop.is_empty() {
                    size += 4 + prop.len() as u64;
                }
                kept.push((
                    Pending {
                        dst: p.dst,
                        ts: p.ts,
                        input: p.input,
                        body: p.body,
                    },
                    prop,
                ));
            }
        }
        if kept.is_empty() {
            continue;
        }
        if let Some(b) = &builder {
            if !b.is_empty() && b.estimated_size() + size > params.target_bytes {
                outputs.push(builder.take().unwrap().finish(creation_ts)?);
            }
        }
        let b = match &mut builder {
            Some(b) => b,
            None => builder.insert(SegmentBuilder::new(
                params.dir,
                next_fid(),
                Arc::clone(params.io),
                params.bloom_bits_per_key,
            )?),
        };
        for (p, prop) in &kept {
            b.add(src, p.dst, p.ts, prop, p.body.tombstone)?;
        }
    }
    if let Some(b) = builder {
        outputs.push(b.finish(creation_ts)?);
    }
    Ok(())
}
