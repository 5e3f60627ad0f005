use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use lsmgraph::engine::FaultInjection;
use lsmgraph::{Engine, EngineConfig};

use crate::report::Report;

#[derive(Args, Debug, Clone)]
pub struct StoreArgs {
    /// Store directory (created if missing). `verify` uses a temporary one when omitted.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// MemGraph budget in MiB; fractions allowed.
    #[arg(long, global = true, default_value_t = 64.0)]
    pub memgraph_mb: f64,
    #[arg(long, global = true, default_value_t = 10)]
    pub level_factor: u64,
    /// Sorted levels below L0.
    #[arg(long, global = true, default_value_t = 5)]
    pub max_levels: usize,
    #[arg(long, global = true, default_value_t = 4)]
    pub l0_limit: usize,
    #[arg(long, global = true, default_value_t = 8.0)]
    pub segment_target_mb: f64,
    #[arg(long, global = true, default_value_t = 10)]
    pub bloom_bits_per_key: usize,
    /// Writer threads.
    #[arg(long, global = true, default_value_t = 8)]
    pub threads: usize,
    /// Flush and compaction threads; 0 runs them only on demand.
    #[arg(long, global = true, default_value_t = 2)]
    pub background_threads: usize,
    /// Locate on-disk adjacency by manifest range search and per-file lookup instead of the index.
    #[arg(long, global = true)]
    pub no_mlindex: bool,
    #[arg(long, global = true, hide = true, value_enum)]
    pub inject_fault: Option<Fault>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SkipTombstones,
}

fn mib(x: f64) -> u64 {
    (x * (1 << 20) as f64).round() as u64
}

impl StoreArgs {
    pub fn config(&self, dir: &Path) -> EngineConfig {
        let mut c = EngineConfig::new(dir);
        c.memgraph_bytes = mib(self.memgraph_mb) as usize;
        c.level_factor = self.level_factor;
        c.max_levels = self.max_levels;
        c.l0_limit = self.l0_limit;
        c.segment_target_bytes = mib(self.segment_target_mb);
        c.bloom_bits_per_key = self.bloom_bits_per_key;
        c.writer_threads = self.threads;
        c.background_threads = self.background_threads;
        c.use_mlindex = !self.no_mlindex;
        c.fault = self.inject_fault.map(|Fault::SkipTombstones| FaultInjection::SkipTombstones);
        c
    }

    /// The store flags that shape behaviour, as they would be typed.
    pub fn flags(&self) -> String {
        let mut f = format!(
            "--memgraph-mb {} --level-factor {} --max-levels {} --l0-limit {} --segment-target-mb {} --bloom-bits-per-key {}",
            self.memgraph_mb, self.level_factor, self.max_levels, self.l0_limit, self.segment_target_mb, self.bloom_bits_per_key
        );
        if self.no_mlindex {
            f.push_str(" --no-mlindex");
        }
        if let Some(Fault::SkipTombstones) = self.inject_fault {
            f.push_str(" --inject-fault skip-tombstones");
        }
        f
    }

    pub fn dir(&self) -> Result<&Path> {
        self.data_dir.as_deref().context("--data-dir is required")
    }

    pub fn open(&self) -> Result<Engine> {
        let dir = self.dir()?;
        Engine::open(self.config(dir)).with_context(|| format!("opening store {}", dir.display()))
    }
}

/// Peak resident set size in KiB, where the platform reports it.
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

pub fn push_engine_stats(r: &mut Report, e: &Engine) {
    let st = e.stats();
    r.push("bytes_read", st.io.bytes_read);
    r.push("bytes_written", st.io.bytes_written);
    r.push("blocks_read", st.io.blocks_read);
    r.push("flushes", st.flushes);
    r.push("compactions", st.compactions);
    for l in &st.levels {
        r.push(format!("level.{}.files", l.level), l.files);
        r.push(format!("level.{}.bytes", l.level), l.bytes);
    }
    if let Some(kib) = peak_rss_kib() {
        r.push("peak_rss_kib", kib);
    }
}

pub fn stats(args: &StoreArgs) -> Result<bool> {
    let mut a = args.clone();
    a.background_threads = 0;
    let e = a.open()?;
    let mut r = Report::default();
    r.push("vertex_bound", e.vertex_bound());
    let st = e.stats();
    r.push("live_versions", st.live_versions);
    r.push("memgraph_bytes", st.memgraph_bytes);
    push_engine_stats(&mut r, &e);
    r.print();
    Ok(true)
}
