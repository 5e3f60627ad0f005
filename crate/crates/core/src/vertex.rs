//! Vertex liveness and ID recycling, persisted as an append-only log.
//!
//! `VERTICES` is a sequence of 17-byte records `[id: u64][ts: u64][kind: u8]`
//! where kind 1 creates and kind 2 deletes. Replaying the log rebuilds the
//! table and the free list of recyclable IDs.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::io::IoStats;
use crate::{Error, Result, Timestamp, VertexId};

pub const VERTEX_LOG_FILE: &str = "VERTICES";
const RECORD_LEN: usize = 17;
const KIND_CREATE: u8 = 1;
const KIND_DELETE: u8 = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Slot {
    created: Timestamp,
    deleted: Option<Timestamp>,
    known: bool,
}

impl Slot {
    fn live(&self) -> bool {
        self.known && self.deleted.is_none()
    }
}

struct Table {
    slots: Vec<Slot>,
    free: BTreeSet<VertexId>,
}

pub struct VertexTable {
    table: RwLock<Table>,
    log: Mutex<BufWriter<File>>,
    bound: AtomicU64,
    io: Arc<IoStats>,
}

impl VertexTable {
    pub fn open(dir: &Path, io: Arc<IoStats>) -> Result<Self> {
        let path = dir.join(VERTEX_LOG_FILE);
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(&path)?.read_to_end(&mut bytes)?;
            io.record_read(0, bytes.len() as u64);
        }
        // a torn final record from a crash is dropped
        let whole = bytes.len() - bytes.len() % RECORD_LEN;
        let mut t = Table {
            slots: Vec::new(),
            free: BTreeSet::new(),
        };
        for r in bytes[..whole].chunks_exact(RECORD_LEN) {
            let id = u64::from_le_bytes(r[0..8].try_into().unwrap());
            let ts = u64::from_le_bytes(r[8..16].try_into().unwrap());
            let slot = Self::slot_mut(&mut t.slots, id);
            match r[16] {
                KIND_CREATE => {
                    *slot = Slot {
                        created: ts,
                        deleted: None,
                        known: true,
                    };
                    t.free.remove(&id);
                }
                KIND_DELETE => {
                    slot.deleted = Some(ts);
                    t.free.insert(id);
                }
                k => {
                    return Err(Error::CorruptVertexLog(format!(
                        "record for vertex {id} has kind {k}"
                    )))
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        file.set_len(whole as u64)?;
        Ok(VertexTable {
            bound: AtomicU64::new(t.slots.len() as u64),
            table: RwLock::new(t),
            log: Mutex::new(BufWriter::new(file)),
            io,
        })
    }

    fn slot_mut(slots: &mut Vec<Slot>, id: VertexId) -> &mut Slot {
        let i = id as usize;
        if i >= slots.len() {
            slots.resize(i + 1, Slot::default());
        }
        &mut slots[i]
    }

    fn append(&self, id: VertexId, ts: Timestamp, kind: u8) -> Result<()> {
        let mut rec = [0u8; RECORD_LEN];
        rec[0..8].copy_from_slice(&id.to_le_bytes());
        rec[8..16].copy_from_slice(&ts.to_le_bytes());
        rec[16] = kind;
        self.log.lock().write_all(&rec)?;
        self.io.record_write(RECORD_LEN as u64);
        Ok(())
    }

    /// One past the largest vertex ID ever created.
    pub fn bound(&self) -> VertexId {
        self.bound.load(Ordering::Acquire)
    }

    /// Makes IDs below `n` known, for stores whose segments name vertices the log lacks.
    pub fn raise_bound(&self, n: VertexId) {
        let mut t = self.table.write();
        for id in t.slots.len() as u64..n {
            *Self::slot_mut(&mut t.slots, id) = Slot {
                created: 0,
                deleted: None,
                known: true,
            };
        }
        self.bound.fetch_max(n, Ordering::AcqRel);
    }

    pub fn is_live(&self, v: VertexId) -> bool {
        self.table
            .read()
            .slots
            .get(v as usize)
            .is_some_and(|s| s.live())
    }

    /// Whether `v` existed at `tau`. A recycled ID only remembers its latest life.
    pub fn live_at(&self, v: VertexId, tau: Timestamp) -> bool {
        self.table.read().slots.get(v as usize).is_some_and(|s| {
            s.known && s.created <= tau && s.deleted.is_none_or(|d| d > tau)
        })
    }

    /// Creates `v` if it is not live. Returns whether it was created.
    pub fn ensure(&self, v: VertexId, ts: Timestamp) -> Result<bool> {
        if self.is_live(v) {
            return Ok(false);
        }
        let mut t = self.table.write();
        let slot = Self::slot_mut(&mut t.slots, v);
        if slot.live() {
            return Ok(false);
        }
        *slot = Slot {
            created: ts,
            deleted: None,
            known: true,
        };
        t.free.remove(&v);
        self.bound.fetch_max(v + 1, Ordering::AcqRel);
        self.append(v, ts, KIND_CREATE)?;
        Ok(true)
    }

    /// Allocates a vertex: the smallest recycled ID if any, else the next fresh one.
    pub fn add(&self, ts: Timestamp) -> Result<VertexId> {
        let mut t = self.table.write();
        let id = match t.free.pop_first() {
            Some(id) => id,
            None => t.slots.len() as u64,
        };
        *Self::slot_mut(&mut t.slots, id) = Slot {
            created: ts,
            deleted: None,
            known: true,
        };
        self.bound.fetch_max(id + 1, Ordering::AcqRel);
        self.append(id, ts, KIND_CREATE)?;
        Ok(id)
    }

    pub fn delete(&self, v: VertexId, ts: Timestamp) -> Result<()> {
        let mut t = self.table.write();
        match t.slots.get_mut(v as usize) {
            Some(s) if s.live() => s.deleted = Some(ts),
            _ => return Err(Error::NotFound),
        }
        t.free.insert(v);
        self.append(v, ts, KIND_DELETE)
    }

    pub fn live_count(&self) -> usize {
        self.table.read().slots.iter().filter(|s| s.live()).count()
    }

    pub fn sync(&self) -> Result<()> {
        let mut log = self.log.lock();
        log.flush()?;
        log.get_ref().sync_data()?;
        Ok(())
    }
}
