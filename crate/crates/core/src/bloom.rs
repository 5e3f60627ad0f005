//! Per-segment bloom filter over edges.
//!
//! Each edge is reduced to a single 64-bit key: the high 32 bits are a digest
//! of the source vertex and the low 32 bits a digest of the destination.
//! Probes use double hashing over two independently seeded mixes of that key.

use crate::hash::{hash32, mix64};
use crate::VertexId;

pub const DEFAULT_BITS_PER_KEY: usize = 10;
pub const DEFAULT_PROBES: u32 = 7;
/// Identifies the hash construction below; stored in segment header flags.
pub const HASH_SCHEME: u8 = 1;

const SEED_A: u64 = 0x243f_6a88_85a3_08d3;
const SEED_B: u64 = 0x1319_8a2e_0370_7344;

#[inline]
pub fn edge_key(src: VertexId, dst: VertexId) -> u64 {
    ((hash32(src) as u64) << 32) | hash32(dst) as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bloom {
    bits: Vec<u8>,
    probes: u32,
}

impl Bloom {
    /// Builds a filter sized for `keys.len()` keys at `bits_per_key`, rounded up to
    /// whole 64-bit words. Zero keys yields a zero-length filter that rejects everything.
    pub fn build(keys: &[u64], bits_per_key: usize, probes: u32) -> Bloom {
        if keys.is_empty() {
            return Bloom {
                bits: Vec::new(),
                probes,
            };
        }
        let nbits = (keys.len() * bits_per_key).max(64).div_ceil(64) * 64;
        let mut bloom = Bloom {
            bits: vec![0u8; nbits / 8],
            probes,
        };
        for &k in keys {
            bloom.insert(k);
        }
        bloom
    }

    pub fn from_bytes(bits: Vec<u8>, probes: u32) -> Bloom {
        Bloom { bits, probes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn probes(&self) -> u32 {
        self.probes
    }

    fn nbits(&self) -> u64 {
        self.bits.len() as u64 * 8
    }

    fn insert(&mut self, key: u64) {
        let m = self.nbits();
        let (h1, h2) = Self::hashes(key);
        for i in 0..self.probes as u64 {
            let bit = h1.wrapping_add(i.wrapping_mul(h2)) % m;
            self.bits[(bit / 8) as usize] |= 1 << (bit % 8);
        }
    }

    #[inline]
    fn hashes(key: u64) -> (u64, u64) {
        (mix64(key ^ SEED_A), mix64(key ^ SEED_B) | 1)
    }

    pub fn may_contain_key(&self, key: u64) -> bool {
        if self.bits.is_empty() {
            return false;
        }
        let m = self.nbits();
        let (h1, h2) = Self::hashes(key);
        (0..self.probes as u64).all(|i| {
            let bit = h1.wrapping_add(i.wrapping_mul(h2)) % m;
            self.bits[(bit / 8) as usize] & (1 << (bit % 8)) != 0
        })
    }

    pub fn may_contain(&self, src: VertexId, dst: VertexId) -> bool {
        self.may_contain_key(edge_key(src, dst))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_layout_concatenates_digests() {
        let k = edge_key(7, 9);
        assert_eq!((k >> 32) as u32, hash32(7));
        assert_eq!(k as u32, hash32(9));
    }

    #[test]
    fn empty_filter_rejects_everything() {
        let b = Bloom::build(&[], 10, 7);
        assert!(b.as_bytes().is_empty());
        for s in 0..100 {
            assert!(!b.may_contain(s, s + 1));
        }
    }

    #[test]
    fn no_false_negatives() {
        let keys: Vec<u64> = (0..5000u64).map(|i| edge_key(i / 7, i * 13)).collect();
        let b = Bloom::build(&keys, 10, 7);
        assert_eq!(b.as_bytes().len() % 8, 0);
        assert!(keys.iter().all(|&k| b.may_contain_key(k)));
    }

    #[test]
    fn false_positive_rate_near_theory() {
        let n = 20_000u64;
        let keys: Vec<u64> = (0..n).map(|i| edge_key(i, i + 1)).collect();
        let b = Bloom::build(&keys, 10, 7);
        let fp = (0..100_000u64)
            .filter(|i| b.may_contain(i + 1_000_000, 3))
            .count();
        // theory for 10 bits/key, k=7 is ~0.82%
        assert!(fp < 2000, "fp={fp}");
    }
}
