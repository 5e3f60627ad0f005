//! Counting layer for every byte the engine moves to and from disk.

use std::fs::File;
use std::io::{self, Write};
use std::ops::Sub;
use std::os::unix::fs::FileExt;
use std::sync::atomic::{AtomicU64, Ordering};

/// Accounting granularity for `blocks_read`.
pub const BLOCK_SIZE: u64 = 4096;

#[derive(Debug, Default)]
pub struct IoStats {
    bytes_read: AtomicU64,
    bytes_written: AtomicU64,
    blocks_read: AtomicU64,
    read_calls: AtomicU64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct IoCounters {
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub blocks_read: u64,
    pub read_calls: u64,
}

impl Sub for IoCounters {
    type Output = IoCounters;

    fn sub(self, rhs: IoCounters) -> IoCounters {
        IoCounters {
            bytes_read: self.bytes_read - rhs.bytes_read,
            bytes_written: self.bytes_written - rhs.bytes_written,
            blocks_read: self.blocks_read - rhs.blocks_read,
            read_calls: self.read_calls - rhs.read_calls,
        }
    }
}

/// Number of `BLOCK_SIZE`-aligned blocks touched by `[offset, offset + len)`.
pub fn blocks_spanned(offset: u64, len: u64) -> u64 {
    if len == 0 {
        return 0;
    }
    (offset + len - 1) / BLOCK_SIZE - offset / BLOCK_SIZE + 1
}

impl IoStats {
    pub fn counters(&self) -> IoCounters {
        IoCounters {
            bytes_read: self.bytes_read.load(Ordering::Relaxed),
            bytes_written: self.bytes_written.load(Ordering::Relaxed),
            blocks_read: self.blocks_read.load(Ordering::Relaxed),
            read_calls: self.read_calls.load(Ordering::Relaxed),
        }
    }

    pub fn record_read(&self, offset: u64, len: u64) {
        self.bytes_read.fetch_add(len, Ordering::Relaxed);
        self.blocks_read
            .fetch_add(blocks_spanned(offset, len), Ordering::Relaxed);
        self.read_calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_write(&self, len: u64) {
        self.bytes_written.fetch_add(len, Ordering::Relaxed);
    }

    /// Positional read that is accounted for.
    pub fn read_exact_at(&self, file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
        file.read_exact_at(buf, offset)?;
        self.record_read(offset, buf.len() as u64);
        Ok(())
    }
}

/// Writer adapter that reports every written byte to an [`IoStats`].
pub struct CountingWriter<'a, W> {
    inner: W,
    stats: &'a IoStats,
    written: u64,
}

impl<'a, W: Write> CountingWriter<'a, W> {
    pub fn new(inner: W, stats: &'a IoStats) -> Self {
        CountingWriter {
            inner,
            stats,
            written: 0,
        }
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn into_inner(self) -> W {
        self.inner
    }

    pub fn get_ref(&self) -> &W {
        &self.inner
    }

    pub fn get_mut(&mut self) -> &mut W {
        &mut self.inner
    }
}

impl<W: Write> Write for CountingWriter<'_, W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written += n as u64;
        self.stats.record_write(n as u64);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_span() {
        assert_eq!(blocks_spanned(0, 0), 0);
        assert_eq!(blocks_spanned(0, 1), 1);
        assert_eq!(blocks_spanned(0, 4096), 1);
        assert_eq!(blocks_spanned(4095, 2), 2);
        assert_eq!(blocks_spanned(4096, 4096), 1);
        assert_eq!(blocks_spanned(100, 8192), 3);
    }
}
