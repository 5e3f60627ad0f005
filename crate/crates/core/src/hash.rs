//! Fixed-seed hashing used by the bloom filters and the in-memory vertex tables.

use std::hash::{BuildHasher, Hasher};

pub(crate) const VERTEX_TABLE_SEED: u64 = 0x6a09_e667_f3bc_c908;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// 32-bit digest of a vertex ID: both halves of the 64-bit mix folded together.
#[inline]
pub fn hash32(v: u64) -> u32 {
    let h = mix64(v);
    (h ^ (h >> 32)) as u32
}

/// Hasher for `u64` keys. Anything written through `write` is folded in 8 bytes at a time.
#[derive(Default, Clone, Copy)]
pub struct VertexHasher(u64);

impl Hasher for VertexHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            self.write_u64(u64::from_le_bytes(buf));
        }
    }

    fn write_u64(&mut self, i: u64) {
        self.0 = mix64(self.0 ^ i ^ VERTEX_TABLE_SEED);
    }
}

#[derive(Default, Clone, Copy)]
pub struct VertexHashBuilder;

impl BuildHasher for VertexHashBuilder {
    type Hasher = VertexHasher;

    fn build_hasher(&self) -> VertexHasher {
        VertexHasher(0)
    }
}
