//! Edge-list loading and synthetic generation.
//!
//! Binary datasets are consecutive little-endian `u64` pairs `(src, dst)`, with a
//! trailing little-endian `f64` weight per edge in the weighted format. Text
//! datasets hold one `src dst [weight]` per line; `#` and `%` start comments.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bytes::Bytes;
use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Weighted,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: u64,
    pub dst: u64,
    pub weight: Option<f64>,
}

impl Edge {
    pub fn prop(&self) -> Bytes {
        match self.weight {
            Some(w) => Bytes::copy_from_slice(&w.to_le_bytes()),
            None => Bytes::new(),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct DatasetArgs {
    /// Edge-list file.
    #[arg(long, conflicts_with = "synthetic_edges")]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Binary)]
    pub format: Format,
    /// Generate this many uniform random edges instead of reading a file.
    #[arg(long)]
    pub synthetic_edges: Option<u64>,
    /// Vertex ID range of generated edges.
    #[arg(long, default_value_t = 1 << 20)]
    pub vertices: u64,
    /// Give generated edges random weights in [0, 1).
    #[arg(long)]
    pub weighted: bool,
    /// Fraction of the dataset inserted before measurement starts.
    #[arg(long, default_value_t = 0.8)]
    pub warmup_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

impl DatasetArgs {
    pub fn load(&self) -> Result<Vec<Edge>> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            bail!("--warmup-fraction must lie in [0, 1]");
        }
        match (&self.dataset, self.synthetic_edges) {
            (Some(p), _) => load(p, self.format),
            (None, Some(n)) => Ok(synthetic(n, self.vertices, self.weighted, self.seed)),
            (None, None) => bail!("either --dataset or --synthetic-edges is required"),
        }
    }

    pub fn warmup_len(&self, total: usize) -> usize {
        (total as f64 * self.warmup_fraction).round() as usize
    }
}

pub fn synthetic(n: u64, vertices: u64, weighted: bool, seed: u64) -> Vec<Edge> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Edge {
            src: rng.gen_range(0..vertices.max(1)),
            dst: rng.gen_range(0..vertices.max(1)),
            weight: weighted.then(|| rng.gen_range(0.0..1.0)),
        })
        .collect()
}

pub fn load(path: &Path, format: Format) -> Result<Vec<Edge>> {
    let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let u64_at = |c: &[u8], i: usize| u64::from_le_bytes(c[i..i + 8].try_into().unwrap());
    match format {
        Format::Binary | Format::Weighted => {
            let width = if format == Format::Weighted { 24 } else { 16 };
            if raw.len() % width != 0 {
                bail!("{}: length {} is not a multiple of {width}", path.display(), raw.len());
            }
            Ok(raw
                .chunks_exact(width)
                .map(|c| Edge {
                    src: u64_at(c, 0),
                    dst: u64_at(c, 8),
                    weight: (width == 24).then(|| f64::from_le_bytes(c[16..24].try_into().unwrap())),
                })
                .collect())
        }
        Format::Text => {
            let text = String::from_utf8(raw).context("text dataset is not UTF-8")?;
            let mut out = Vec::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') || line.starts_with('%') {
                    continue;
                }
                let f: Vec<&str> = line.split_whitespace().collect();
                let bad = || format!("{}:{}: expected `src dst [weight]`", path.display(), n + 1);
                if !(2..=3).contains(&f.len()) {
                    bail!(bad());
                }
                out.push(Edge {
                    src: f[0].parse().with_context(bad)?,
                    dst: f[1].parse().with_context(bad)?,
                    weight: f.get(2).map(|w| w.parse()).transpose().with_context(bad)?,
                });
            }
            Ok(out)
        }
    }
}
