//! Immutable on-disk CSR segments.
//!
//! A segment is a pair of files. `<fid>.edge` is laid out as
//!
//! ```text
//! [header 64B][bloom][offsets: count x 16B][bodies: count x 32B][crc32 4B]
//! ```
//!
//! and `<fid>.prop` is a concatenation of `{len: u32, bytes[len]}` entries. All
//! integers are little-endian. The offsets section holds one `(src, first body
//! index)` pair per source vertex, ascending by `src`; the bodies of one vertex
//! are contiguous and sorted by `(dst, ts)`.
//!
//! Readers keep the header, the bloom filter and a sparse fence over the offsets
//! section in memory. Offsets and bodies are read from disk on demand.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use bytes::Bytes;

use crate::bloom::{self, Bloom};
use crate::io::{CountingWriter, IoStats};
use crate::memgraph::EdgeRecord;
use crate::{Error, FileId, Result, Timestamp, VertexId};

pub const MAGIC: [u8; 4] = *b"LSMG";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 64;
pub const OFFSET_ENTRY_LEN: u64 = 16;
pub const EDGE_BODY_LEN: u64 = 32;
pub const CRC_LEN: u64 = 4;
/// `prop_offset` value meaning "edge has no property".
pub const NO_PROPERTY: u64 = u64::MAX;
/// Offset entries covered by one in-memory fence key (one 4 KiB block's worth).
pub const FENCE_STRIDE: usize = 256;

const ITER_CHUNK_BODIES: usize = 4096;
const PROP_WINDOW: u64 = 64 << 10;

pub fn edge_path(dir: &Path, fid: FileId) -> PathBuf {
    dir.join(format!("{fid}.edge"))
}

pub fn prop_path(dir: &Path, fid: FileId) -> PathBuf {
    dir.join(format!("{fid}.prop"))
}

fn tmp_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".tmp");
    PathBuf::from(s)
}

pub(crate) fn sync_dir(dir: &Path) -> std::io::Result<()> {
    File::open(dir)?.sync_all()
}

#[inline]
fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeFileHeader {
    pub format_version: u16,
    /// Low byte: bloom probe count. High byte: bloom hash scheme.
    pub flags: u16,
    pub edge_body_count: u64,
    pub edge_offset_count: u64,
    pub min_src: VertexId,
    pub max_src: VertexId,
    pub creation_ts: Timestamp,
    pub bloom_len_bytes: u64,
}

impl EdgeFileHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.format_version.to_le_bytes());
        b[6..8].copy_from_slice(&self.flags.to_le_bytes());
        b[8..16].copy_from_slice(&self.edge_body_count.to_le_bytes());
        b[16..24].copy_from_slice(&self.edge_offset_count.to_le_bytes());
        b[24..32].copy_from_slice(&self.min_src.to_le_bytes());
        b[32..40].copy_from_slice(&self.max_src.to_le_bytes());
        b[40..48].copy_from_slice(&self.creation_ts.to_le_bytes());
        b[48..56].copy_from_slice(&self.bloom_len_bytes.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> std::result::Result<Self, String> {
        if b.len() < HEADER_LEN as usize {
            return Err("short header".into());
        }
        if b[0..4] != MAGIC {
            return Err("bad magic".into());
        }
        let h = EdgeFileHeader {
            format_version: u16::from_le_bytes([b[4], b[5]]),
            flags: u16::from_le_bytes([b[6], b[7]]),
            edge_body_count: le_u64(b, 8),
            edge_offset_count: le_u64(b, 16),
            min_src: le_u64(b, 24),
            max_src: le_u64(b, 32),
            creation_ts: le_u64(b, 40),
            bloom_len_bytes: le_u64(b, 48),
        };
        if h.format_version != FORMAT_VERSION {
            return Err(format!("unsupported format version {}", h.format_version));
        }
        if b[56..64].iter().any(|&x| x != 0) {
            return Err("reserved header bytes are not zero".into());
        }
        Ok(h)
    }

    pub fn bloom_probes(&self) -> u32 {
        (self.flags & 0xff) as u32
    }

    fn offsets_start(&self) -> u64 {
        HEADER_LEN + self.bloom_len_bytes
    }

    fn bodies_start(&self) -> u64 {
        self.offsets_start() + self.edge_offset_count * OFFSET_ENTRY_LEN
    }

    fn file_len(&self) -> u64 {
        self.bodies_start() + self.edge_body_count * EDGE_BODY_LEN + CRC_LEN
    }
}

/// One fixed-size edge body as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeBody {
    pub dst: VertexId,
    pub ts: Timestamp,
    pub prop_offset: u64,
    pub tombstone: bool,
}

impl EdgeBody {
    pub fn encode(&self) -> [u8; EDGE_BODY_LEN as usize] {
        let mut b = [0u8; EDGE_BODY_LEN as usize];
        b[0..8].copy_from_slice(&self.dst.to_le_bytes());
        b[8..16].copy_from_slice(&self.ts.to_le_bytes());
        b[16..24].copy_from_slice(&self.prop_offset.to_le_bytes());
        b[24] = self.tombstone as u8;
        b
    }

    pub fn decode(b: &[u8]) -> std::result::Result<Self, String> {
        let marker = b[24];
        if marker > 1 || b[25..32].iter().any(|&x| x != 0) {
            return Err(format!("bad marker bytes {:?}", &b[24..32]));
        }
        Ok(EdgeBody {
            dst: le_u64(b, 0),
            ts: le_u64(b, 8),
            prop_offset: le_u64(b, 16),
            tombstone: marker == 1,
        })
    }

    pub fn has_property(&self) -> bool {
        self.prop_offset != NO_PROPERTY
    }
}

/// Manifest-level description of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentMeta {
    pub fid: FileId,
    pub min_src: VertexId,
    pub max_src: VertexId,
    pub body_count: u64,
    pub bytes: u64,
}

impl SegmentMeta {
    pub fn overlaps(&self, lo: VertexId, hi: VertexId) -> bool {
        self.min_src <= hi && lo <= self.max_src
    }
}

/// Location of one vertex's bodies inside a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VertexRun {
    pub src: VertexId,
    pub offset: u64,
    pub len: u64,
}

/// Bytes a vertex with these bodies adds to a segment (offset entry, bodies, properties).
pub fn vertex_footprint(bodies: usize, prop_bytes: usize, props: usize) -> u64 {
    OFFSET_ENTRY_LEN + bodies as u64 * EDGE_BODY_LEN + prop_bytes as u64 + 4 * props as u64
}

pub struct SegmentBuilder {
    dir: PathBuf,
    fid: FileId,
    io: Arc<IoStats>,
    bits_per_key: usize,
    offsets: Vec<(VertexId, u64)>,
    bodies: Vec<EdgeBody>,
    keys: Vec<u64>,
    prop: Option<BufWriter<File>>,
    prop_len: u64,
    last: Option<(VertexId, VertexId, Timestamp)>,
}

pub struct BuiltSegment {
    pub segment: Arc<Segment>,
    pub runs: Vec<VertexRun>,
}

impl SegmentBuilder {
    pub fn new(dir: &Path, fid: FileId, io: Arc<IoStats>, bits_per_key: usize) -> Result<Self> {
        let f = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(tmp_path(&prop_path(dir, fid)))?;
        Ok(SegmentBuilder {
            dir: dir.to_path_buf(),
            fid,
            io,
            bits_per_key,
            offsets: Vec::new(),
            bodies: Vec::new(),
            keys: Vec::new(),
            prop: Some(BufWriter::with_capacity(256 << 10, f)),
            prop_len: 0,
            last: None,
        })
    }

    pub fn fid(&self) -> FileId {
        self.fid
    }

    pub fn is_empty(&self) -> bool {
        self.bodies.is_empty()
    }

    pub fn body_count(&self) -> usize {
        self.bodies.len()
    }

    /// Size estimate using the same accounting as [`vertex_footprint`].
    pub fn estimated_size(&self) -> u64 {
        self.offsets.len() as u64 * OFFSET_ENTRY_LEN
            + self.bodies.len() as u64 * EDGE_BODY_LEN
            + self.prop_len
    }

    /// Appends one record. Records must arrive strictly ascending by `(src, dst, ts)`.
    pub fn add(
        &mut self,
        src: VertexId,
        dst: VertexId,
        ts: Timestamp,
        prop: &[u8],
        tombstone: bool,
    ) -> Result<()> {
        let key = (src, dst, ts);
        if let Some(last) = self.last {
            if key <= last {
                return Err(Error::Contract(format!(
                    "segment records out of order: {last:?} then {key:?}"
                )));
            }
        }
        if self.last.is_none_or(|l| l.0 != src) {
            self.offsets.push((src, self.bodies.len() as u64));
        }
        if self.last.is_none_or(|l| (l.0, l.1) != (src, dst)) {
            self.keys.push(bloom::edge_key(src, dst));
        }
        self.last = Some(key);
        let prop_offset = if prop.is_empty() {
            NO_PROPERTY
        } else {
            let off = self.prop_len;
            let w = self.prop.as_mut().expect("builder already finished");
            w.write_all(&(prop.len() as u32).to_le_bytes())?;
            w.write_all(prop)?;
            self.prop_len += 4 + prop.len() as u64;
            self.io.record_write(4 + prop.len() as u64);
            off
        };
        self.bodies.push(EdgeBody {
            dst,
            ts,
            prop_offset,
            tombstone,
        });
        Ok(())
    }

    pub fn add_record(&mut self, src: VertexId, rec: &EdgeRecord) -> Result<()> {
        self.add(src, rec.dst, rec.ts, &rec.prop, rec.tombstone)
    }

    /// Writes the edge file, makes both files durable and visible, and opens the result.
    pub fn finish(mut self, creation_ts: Timestamp) -> Result<BuiltSegment> {
        if self.bodies.is_empty() {
            return Err(Error::Contract("cannot build an empty segment".into()));
        }
        let bloom = Bloom::build(&self.keys, self.bits_per_key, bloom::DEFAULT_PROBES);
        let header = EdgeFileHeader {
            format_version: FORMAT_VERSION,
            flags: (bloom.probes() as u16 & 0xff) | ((bloom::HASH_SCHEME as u16) << 8),
            edge_body_count: self.bodies.len() as u64,
            edge_offset_count: self.offsets.len() as u64,
            min_src: self.offsets[0].0,
            max_src: self.offsets[self.offsets.len() - 1].0,
            creation_ts,
            bloom_len_bytes: bloom.as_bytes().len() as u64,
        };

        let mut prop = self.prop.take().expect("builder already finished");
        prop.flush()?;
        prop.get_ref().sync_all()?;
        drop(prop);

        let edge_final = edge_path(&self.dir, self.fid);
        let edge_tmp = tmp_path(&edge_final);
        {
            let f = OpenOptions::new()
                .write(true)
                .create(true)
                .truncate(true)
                .open(&edge_tmp)?;
            let mut w = CountingWriter::new(BufWriter::with_capacity(256 << 10, f), &self.io);
            let mut crc = crc32fast::Hasher::new();
            let mut put = |w: &mut CountingWriter<_>, b: &[u8]| -> std::io::Result<()> {
                crc.update(b);
                w.write_all(b)
            };
            put(&mut w, &header.encode())?;
            put(&mut w, bloom.as_bytes())?;
            for &(src, off) in &self.offsets {
                let mut e = [0u8; OFFSET_ENTRY_LEN as usize];
                e[..8].copy_from_slice(&src.to_le_bytes());
                e[8..].copy_from_slice(&off.to_le_bytes());
                put(&mut w, &e)?;
            }
            for b in &self.bodies {
                put(&mut w, &b.encode())?;
            }
            w.write_all(&crc.finalize().to_le_bytes())?;
            w.flush()?;
            w.get_ref().get_ref().sync_all()?;
        }
        let prop_final = prop_path(&self.dir, self.fid);
        fs::rename(tmp_path(&prop_final), &prop_final)?;
        fs::rename(&edge_tmp, &edge_final)?;
        sync_dir(&self.dir)?;

        let runs = runs_from_offsets(&self.offsets, self.bodies.len() as u64);
        let fence = self
            .offsets
            .iter()
            .step_by(FENCE_STRIDE)
            .map(|&(s, _)| s)
            .collect();
        let segment = Segment::from_parts(
            &self.dir,
            self.fid,
            header,
            bloom,
            fence,
            self.prop_len,
            Arc::clone(&self.io),
        )?;
        Ok(BuiltSegment {
            segment: Arc::new(segment),
            runs,
        })
    }
}

impl Drop for SegmentBuilder {
    fn drop(&mut self) {
        if self.prop.is_some() {
            // abandoned before finish
            let _ = fs::remove_file(tmp_path(&prop_path(&self.dir, self.fid)));
            let _ = fs::remove_file(tmp_path(&edge_path(&self.dir, self.fid)));
        }
    }
}

fn runs_from_offsets(offsets: &[(VertexId, u64)], body_count: u64) -> Vec<VertexRun> {
    offsets
        .iter()
        .enumerate()
        .map(|(i, &(src, off))| {
            let end = offsets.get(i + 1).map_or(body_count, |n| n.1);
            VertexRun {
                src,
                offset: off,
                len: end - off,
            }
        })
        .collect()
}

/// Builds a segment from a `(src, dst, ts)`-sorted record stream.
pub fn build(
    records: impl IntoIterator<Item = (VertexId, EdgeRecord)>,
    fid: FileId,
    dir: &Path,
    io: Arc<IoStats>,
    bits_per_key: usize,
    creation_ts: Timestamp,
) -> Result<BuiltSegment> {
    let mut b = SegmentBuilder::new(dir, fid, io, bits_per_key)?;
    for (src, rec) in records {
        b.add_record(src, &rec)?;
    }
    b.finish(creation_ts)
}

pub struct Segment {
    fid: FileId,
    header: EdgeFileHeader,
    edge: File,
    prop: File,
    prop_len: u64,
    bloom: Bloom,
    fence: Vec<VertexId>,
    io: Arc<IoStats>,
    edge_path: PathBuf,
    prop_path: PathBuf,
    obsolete: AtomicBool,
}

impl std::fmt::Debug for Segment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Segment")
            .field("fid", &self.fid)
            .field("header", &self.header)
            .finish()
    }
}

impl Segment {
    fn from_parts(
        dir: &Path,
        fid: FileId,
        header: EdgeFileHeader,
        bloom: Bloom,
        fence: Vec<VertexId>,
        prop_len: u64,
        io: Arc<IoStats>,
    ) -> Result<Segment> {
        let edge_path = edge_path(dir, fid);
        let prop_path = prop_path(dir, fid);
        Ok(Segment {
            fid,
            header,
            edge: File::open(&edge_path)?,
            prop: File::open(&prop_path)?,
            prop_len,
            bloom,
            fence,
            io,
            edge_path,
            prop_path,
            obsolete: AtomicBool::new(false),
        })
    }

    /// Opens and fully validates `<fid>.edge` / `<fid>.prop`: checksum, header,
    /// section lengths, offset monotonicity and per-vertex body order.
    pub fn open(dir: &Path, fid: FileId, io: Arc<IoStats>) -> Result<Arc<Segment>> {
        let edge = File::open(edge_path(dir, fid))?;
        let len = edge.metadata()?.len();
        if len < HEADER_LEN + CRC_LEN {
            return Err(Error::corrupt(fid, "edge file too short"));
        }
        let mut buf = vec![0u8; len as usize];
        io.read_exact_at(&edge, &mut buf, 0)?;
        let (data, tail) = buf.split_at((len - CRC_LEN) as usize);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(data) != stored {
            return Err(Error::corrupt(fid, "checksum mismatch"));
        }
        let header = EdgeFileHeader::decode(data).map_err(|e| Error::corrupt(fid, e))?;
        if header.file_len() != len {
            return Err(Error::corrupt(
                fid,
                format!(
                    "section lengths add up to {} but file is {len} bytes",
                    header.file_len()
                ),
            ));
        }
        if header.edge_offset_count > header.edge_body_count
            || header.edge_offset_count == 0
            || header.min_src > header.max_src
        {
            return Err(Error::corrupt(fid, "inconsistent header counts"));
        }
        let prop_len = File::open(prop_path(dir, fid))?.metadata()?.len();

        let bloom_start = HEADER_LEN as usize;
        let off_start = header.offsets_start() as usize;
        let body_start = header.bodies_start() as usize;
        let bloom = Bloom::from_bytes(
            data[bloom_start..off_start].to_vec(),
            header.bloom_probes(),
        );

        let n = header.edge_offset_count as usize;
        let mut offsets = Vec::with_capacity(n);
        for i in 0..n {
            let at = off_start + i * OFFSET_ENTRY_LEN as usize;
            offsets.push((le_u64(data, at), le_u64(data, at + 8)));
        }
        if offsets[0].1 != 0
            || offsets[0].0 != header.min_src
            || offsets[n - 1].0 != header.max_src
            || offsets
                .windows(2)
                .any(|w| w[0].0 >= w[1].0 || w[0].1 >= w[1].1)
            || offsets[n - 1].1 >= header.edge_body_count
        {
            return Err(Error::corrupt(fid, "edge offsets are not monotone"));
        }
        for run in runs_from_offsets(&offsets, header.edge_body_count) {
            let mut prev: Option<(VertexId, Timestamp)> = None;
            for j in run.offset..run.offset + run.len {
                let at = body_start + j as usize * EDGE_BODY_LEN as usize;
                let b = EdgeBody::decode(&data[at..at + EDGE_BODY_LEN as usize])
                    .map_err(|e| Error::corrupt(fid, e))?;
                if prev.is_some_and(|p| p >= (b.dst, b.ts)) {
                    return Err(Error::corrupt(fid, "edge bodies out of order"));
                }
                if b.has_property() && b.prop_offset + 4 > prop_len {
                    return Err(Error::corrupt(fid, "property offset out of bounds"));
                }
                prev = Some((b.dst, b.ts));
            }
        }
        let fence = offsets.iter().step_by(FENCE_STRIDE).map(|&(s, _)| s).collect();
        drop(edge);
        Ok(Arc::new(Segment::from_parts(
            dir, fid, header, bloom, fence, prop_len, io,
        )?))
    }

    pub fn fid(&self) -> FileId {
        self.fid
    }

    pub fn header(&self) -> &EdgeFileHeader {
        &self.header
    }

    pub fn min_src(&self) -> VertexId {
        self.header.min_src
    }

    pub fn max_src(&self) -> VertexId {
        self.header.max_src
    }

    pub fn body_count(&self) -> u64 {
        self.header.edge_body_count
    }

    pub fn creation_ts(&self) -> Timestamp {
        self.header.creation_ts
    }

    pub fn covers(&self, src: VertexId) -> bool {
        self.header.min_src <= src && src <= self.header.max_src
    }

    pub fn bytes(&self) -> u64 {
        self.header.file_len() + self.prop_len
    }

    pub fn meta(&self) -> SegmentMeta {
        SegmentMeta {
            fid: self.fid,
            min_src: self.header.min_src,
            max_src: self.header.max_src,
            body_count: self.header.edge_body_count,
            bytes: self.bytes(),
        }
    }

    /// Deletes the files once the last handle to this segment is dropped.
    pub fn mark_obsolete(&self) {
        self.obsolete.store(true, Ordering::Release);
    }

    pub fn maybe_contains(&self, src: VertexId, dst: VertexId) -> bool {
        self.covers(src) && self.bloom.may_contain(src, dst)
    }

    fn read_offset_entries(&self, from: usize, to: usize) -> Result<Vec<(VertexId, u64)>> {
        let mut buf = vec![0u8; (to - from) * OFFSET_ENTRY_LEN as usize];
        let at = self.header.offsets_start() + from as u64 * OFFSET_ENTRY_LEN;
        self.io.read_exact_at(&self.edge, &mut buf, at)?;
        Ok(buf
            .chunks_exact(OFFSET_ENTRY_LEN as usize)
            .map(|c| (le_u64(c, 0), le_u64(c, 8)))
            .collect())
    }

    /// Finds `src` in the offsets section. Costs no disk read when `src` is out of range.
    pub fn locate(&self, src: VertexId) -> Result<Option<VertexRun>> {
        if !self.covers(src) {
            return Ok(None);
        }
        let stripe = self.fence.partition_point(|&s| s <= src);
        if stripe == 0 {
            return Ok(None);
        }
        let n = self.header.edge_offset_count as usize;
        let from = (stripe - 1) * FENCE_STRIDE;
        let to = (from + FENCE_STRIDE + 1).min(n);
        let entries = self.read_offset_entries(from, to)?;
        let Ok(i) = entries.binary_search_by_key(&src, |e| e.0) else {
            return Ok(None);
        };
        let end = match entries.get(i + 1) {
            Some(next) => next.1,
            None if from + i + 1 == n => self.header.edge_body_count,
            None => unreachable!("stripe read includes the following entry"),
        };
        let offset = entries[i].1;
        if end <= offset || end > self.header.edge_body_count {
            return Err(Error::corrupt(self.fid, "edge offsets are not monotone"));
        }
        Ok(Some(VertexRun {
            src,
            offset,
            len: end - offset,
        }))
    }

    /// All bodies of `src`, via the offsets section.
    pub fn read_adjacency(&self, src: VertexId) -> Result<Vec<EdgeBody>> {
        match self.locate(src)? {
            Some(run) => self.read_run(run.offset, run.len),
            None => Ok(Vec::new()),
        }
    }

    /// `len` bodies starting at body index `offset`, in one read.
    pub fn read_run(&self, offset: u64, len: u64) -> Result<Vec<EdgeBody>> {
        if offset.checked_add(len).is_none_or(|e| e > self.header.edge_body_count) {
            return Err(Error::corrupt(
                self.fid,
                format!("body run {offset}+{len} past end"),
            ));
        }
        if len == 0 {
            return Ok(Vec::new());
        }
        let mut buf = vec![0u8; (len * EDGE_BODY_LEN) as usize];
        let at = self.header.bodies_start() + offset * EDGE_BODY_LEN;
        self.io.read_exact_at(&self.edge, &mut buf, at)?;
        buf.chunks_exact(EDGE_BODY_LEN as usize)
            .map(|c| EdgeBody::decode(c).map_err(|e| Error::corrupt(self.fid, e)))
            .collect()
    }

    pub fn read_property(&self, prop_offset: u64) -> Result<Bytes> {
        if prop_offset == NO_PROPERTY {
            return Ok(Bytes::new());
        }
        if prop_offset.checked_add(4).is_none_or(|e| e > self.prop_len) {
            return Err(Error::corrupt(self.fid, "property offset out of bounds"));
        }
        let mut lenb = [0u8; 4];
        self.io.read_exact_at(&self.prop, &mut lenb, prop_offset)?;
        let len = u32::from_le_bytes(lenb) as u64;
        if prop_offset + 4 + len > self.prop_len {
            return Err(Error::corrupt(self.fid, "property runs past end of file"));
        }
        let mut buf = vec![0u8; len as usize];
        self.io.read_exact_at(&self.prop, &mut buf, prop_offset + 4)?;
        Ok(Bytes::from(buf))
    }

    pub fn prop_cursor(&self) -> PropCursor<'_> {
        PropCursor {
            seg: self,
            start: 0,
            buf: Bytes::new(),
        }
    }

    /// Properties of a run of bodies, read through one sequential window.
    pub fn read_properties(&self, bodies: &[EdgeBody]) -> Result<Vec<Bytes>> {
        let mut cur = self.prop_cursor();
        bodies.iter().map(|b| cur.get(b.prop_offset)).collect()
    }

    /// Every vertex run, from one read of the offsets section.
    pub fn runs(&self) -> Result<Vec<VertexRun>> {
        let entries = self.read_offset_entries(0, self.header.edge_offset_count as usize)?;
        Ok(runs_from_offsets(&entries, self.header.edge_body_count))
    }

    /// Sequential scan of every `(src, body)` in file order.
    pub fn iter(&self) -> Result<SegmentIter<'_>> {
        let runs = self.runs()?;
        Ok(SegmentIter {
            seg: self,
            runs: runs.into_iter(),
            run: None,
            next_body: 0,
            buf: Vec::new(),
            buf_base: 0,
        })
    }
}

impl Drop for Segment {
    fn drop(&mut self) {
        if self.obsolete.load(Ordering::Acquire) {
            let _ = fs::remove_file(&self.edge_path);
            let _ = fs::remove_file(&self.prop_path);
        }
    }
}

/// Buffered reader over the property file for ascending offset requests.
pub struct PropCursor<'a> {
    seg: &'a Segment,
    start: u64,
    buf: Bytes,
}

impl PropCursor<'_> {
    fn fill(&mut self, at: u64, need: u64) -> Result<()> {
        let want = need.max(PROP_WINDOW).min(self.seg.prop_len - at);
        if want < need {
            return Err(Error::corrupt(self.seg.fid, "property runs past end of file"));
        }
        let mut v = vec![0u8; want as usize];
        self.seg.io.read_exact_at(&self.seg.prop, &mut v, at)?;
        self.start = at;
        self.buf = Bytes::from(v);
        Ok(())
    }

    fn window(&self, at: u64, len: u64) -> Option<Bytes> {
        let end = self.start + self.buf.len() as u64;
        (at >= self.start && at + len <= end).then(|| {
            let lo = (at - self.start) as usize;
            self.buf.slice(lo..lo + len as usize)
        })
    }

    pub fn get(&mut self, prop_offset: u64) -> Result<Bytes> {
        if prop_offset == NO_PROPERTY {
            return Ok(Bytes::new());
        }
        if prop_offset + 4 > self.seg.prop_len {
            return Err(Error::corrupt(self.seg.fid, "property offset out of bounds"));
        }
        let lenb = match self.window(prop_offset, 4) {
            Some(b) => b,
            None => {
                self.fill(prop_offset, 4)?;
                self.window(prop_offset, 4).unwrap()
            }
        };
        let len = u32::from_le_bytes(lenb[..].try_into().unwrap()) as u64;
        match self.window(prop_offset + 4, len) {
            Some(b) => Ok(b),
            None => {
                self.fill(prop_offset, 4 + len)?;
                Ok(self.window(prop_offset + 4, len).unwrap())
            }
        }
    }
}

pub struct SegmentIter<'a> {
    seg: &'a Segment,
    runs: std::vec::IntoIter<VertexRun>,
    run: Option<(VertexId, u64)>,
    next_body: u64,
    buf: Vec<EdgeBody>,
    buf_base: u64,
}

impl Iterator for SegmentIter<'_> {
    type Item = Result<(VertexId, EdgeBody)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.run {
                Some((src, end)) if self.next_body < end => break Some(src),
                _ => {
                    let r = self.runs.next()?;
                    self.run = Some((r.src, r.offset + r.len));
                }
            }
        }
        .map(|src| {
            let i = self.next_body;
            if i < self.buf_base || i >= self.buf_base + self.buf.len() as u64 {
                let len = (self.seg.body_count() - i).min(ITER_CHUNK_BODIES as u64);
                self.buf = self.seg.read_run(i, len)?;
                self.buf_base = i;
            }
            self.next_body += 1;
            Ok((src, self.buf[(i - self.buf_base) as usize]))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(dst: u64, ts: u64) -> EdgeRecord {
        EdgeRecord::live(dst, ts, Bytes::new())
    }

    fn io() -> Arc<IoStats> {
        Arc::new(IoStats::default())
    }

    #[test]
    fn header_round_trip() {
        let h = EdgeFileHeader {
            format_version: FORMAT_VERSION,
            flags: 0x0107,
            edge_body_count: 9,
            edge_offset_count: 3,
            min_src: 2,
            max_src: 40,
            creation_ts: 77,
            bloom_len_bytes: 16,
        };
        let b = h.encode();
        assert_eq!(&b[..4], b"LSMG");
        assert_eq!(EdgeFileHeader::decode(&b).unwrap(), h);
        let mut bad = b;
        bad[0] = b'X';
        assert!(EdgeFileHeader::decode(&bad).is_err());
    }

    #[test]
    fn two_vertex_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let built = build(
            vec![(0, rec(1, 1)), (1, rec(3, 2))],
            7,
            dir.path(),
            io(),
            10,
            2,
        )
        .unwrap();
        let h = *built.segment.header();
        assert_eq!(
            (h.edge_body_count, h.edge_offset_count, h.min_src, h.max_src),
            (2, 2, 0, 1)
        );
        assert_eq!(
            built.runs,
            vec![
                VertexRun { src: 0, offset: 0, len: 1 },
                VertexRun { src: 1, offset: 1, len: 1 }
            ]
        );
        let raw = fs::read(edge_path(dir.path(), 7)).unwrap();
        assert_eq!(raw.len() as u64, 64 + h.bloom_len_bytes + 2 * 16 + 2 * 32 + 4);
        let off = (64 + h.bloom_len_bytes) as usize;
        assert_eq!(le_u64(&raw, off), 0);
        assert_eq!(le_u64(&raw, off + 8), 0);
        assert_eq!(le_u64(&raw, off + 16), 1);
        assert_eq!(le_u64(&raw, off + 24), 1);
        let body = off + 32;
        assert_eq!(le_u64(&raw, body), 1);
        assert_eq!(le_u64(&raw, body + 8), 1);
        assert_eq!(le_u64(&raw, body + 16), NO_PROPERTY);
        assert_eq!(&raw[body + 24..body + 32], &[0u8; 8]);
        assert_eq!(fs::metadata(prop_path(dir.path(), 7)).unwrap().len(), 0);
    }

    #[test]
    fn single_edge() {
        let dir = tempfile::tempdir().unwrap();
        let s = build(vec![(5, rec(6, 1))], 1, dir.path(), io(), 10, 1)
            .unwrap()
            .segment;
        let h = s.header();
        assert_eq!((h.edge_offset_count, h.edge_body_count), (1, 1));
        assert_eq!((h.min_src, h.max_src), (5, 5));
        assert_eq!(s.read_adjacency(5).unwrap().len(), 1);
    }

    #[test]
    fn empty_build_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build(Vec::new(), 1, dir.path(), io(), 10, 0),
            Err(Error::Contract(_))
        ));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn out_of_order_input_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = build(
            vec![(1, rec(2, 1)), (0, rec(2, 2))],
            1,
            dir.path(),
            io(),
            10,
            0,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn out_of_range_lookup_does_no_io() {
        let dir = tempfile::tempdir().unwrap();
        let stats = io();
        let s = build(
            vec![(10, rec(1, 1)), (20, rec(1, 2))],
            1,
            dir.path(),
            Arc::clone(&stats),
            10,
            2,
        )
        .unwrap()
        .segment;
        let before = stats.counters();
        assert!(s.read_adjacency(5).unwrap().is_empty());
        assert!(s.read_adjacency(21).unwrap().is_empty());
        assert_eq!(stats.counters().read_calls, before.read_calls);
        assert!(s.read_adjacency(15).unwrap().is_empty());
        assert!(stats.counters().read_calls > before.read_calls);
    }

    #[test]
    fn properties_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut input = Vec::new();
        for i in 0..300u64 {
            let len = if i % 5 == 0 { 0 } else { rng.gen_range(1..=1024) };
            let p: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            input.push((i / 3, EdgeRecord::live(i, i + 1, p)));
        }
        input.push((200, EdgeRecord::live(1, 900, &b"wt=1.5"[..])));
        let s = build(input.clone(), 4, dir.path(), io(), 10, 900)
            .unwrap()
            .segment;
        let reopened = Segment::open(dir.path(), 4, io()).unwrap();
        for seg in [&s, &reopened] {
            for (src, r) in &input {
                let bodies = seg.read_adjacency(*src).unwrap();
                let b = bodies.iter().find(|b| b.dst == r.dst).unwrap();
                assert_eq!(seg.read_property(b.prop_offset).unwrap(), r.prop);
            }
            let bodies = seg.read_adjacency(0).unwrap();
            let props = seg.read_properties(&bodies).unwrap();
            assert_eq!(props.len(), 3);
        }
        assert!(s.read_property(NO_PROPERTY).unwrap().is_empty());
        assert!(matches!(
            s.read_property(1 << 40),
            Err(Error::CorruptSegment { .. })
        ));
    }

    #[test]
    fn thousand_edge_round_trip_via_iter_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut input: Vec<(u64, u64, u64, bool)> = (0..1000)
            .map(|ts| {
                (
                    rng.gen_range(0..2000),
                    rng.gen_range(0..2000),
                    ts + 1,
                    rng.gen_bool(0.1),
                )
            })
            .collect();
        input.sort_unstable();
        input.dedup_by_key(|e| (e.0, e.1, e.2));
        let recs = input.iter().map(|&(s, d, ts, t)| {
            (
                s,
                EdgeRecord {
                    dst: d,
                    ts,
                    prop: Bytes::new(),
                    tombstone: t,
                },
            )
        });
        build(recs, 11, dir.path(), io(), 10, 1000).unwrap();
        let s = Segment::open(dir.path(), 11, io()).unwrap();
        let scanned: Vec<_> = s
            .iter()
            .unwrap()
            .map(|r| {
                let (src, b) = r.unwrap();
                (src, b.dst, b.ts, b.tombstone)
            })
            .collect();
        assert_eq!(scanned, input);
        let mut via_lookup = Vec::new();
        for v in 0..2000 {
            for b in s.read_adjacency(v).unwrap() {
                via_lookup.push((v, b.dst, b.ts, b.tombstone));
            }
        }
        assert_eq!(via_lookup, input);
        for &(src, dst, _, _) in &input {
            assert!(s.maybe_contains(src, dst));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        build(
            (0..50u64).map(|i| (i, rec(i + 1, i + 1))),
            3,
            dir.path(),
            io(),
            10,
            50,
        )
        .unwrap();
        let p = edge_path(dir.path(), 3);
        let mut raw = fs::read(&p).unwrap();
        let mid = raw.len() / 2;
        raw[mid] ^= 0x40;
        fs::write(&p, &raw).unwrap();
        assert!(matches!(
            Segment::open(dir.path(), 3, io()),
            Err(Error::CorruptSegment { .. })
        ));
        raw.truncate(raw.len() - 10);
        fs::write(&p, &raw).unwrap();
        assert!(Segment::open(dir.path(), 3, io()).is_err());
    }

    #[test]
    fn obsolete_segment_deleted_on_last_drop() {
        let dir = tempfile::tempdir().unwrap();
        let s = build(vec![(1, rec(2, 1))], 8, dir.path(), io(), 10, 1)
            .unwrap()
            .segment;
        let other = Arc::clone(&s);
        s.mark_obsolete();
        drop(s);
        assert!(edge_path(dir.path(), 8).exists());
        assert_eq!(other.read_adjacency(1).unwrap().len(), 1);
        drop(other);
        assert!(!edge_path(dir.path(), 8).exists());
        assert!(!prop_path(dir.path(), 8).exists());
    }
}
